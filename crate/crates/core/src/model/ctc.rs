//! Connectionist temporal classification loss.
//!
//! The forward-backward recursions run in `f64` log space regardless of the
//! logits' precision.

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Loss value and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct CtcOutput {
    /// `-ln p(target | logits)`; `+inf` when no alignment exists.
    pub loss: f64,
    /// `d loss / d logits`, `[T', V+1]`; zero when infeasible.
    pub grad: Tensor<f64>,
    pub feasible: bool,
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Result<(usize, usize, Vec<f64>)> {
    let (t, k) = match logits.shape() {
        &[t, k] => (t, k),
        s => return Err(shape_err("ctc", format!("logits must be [T', V+1], got {s:?}"))),
    };
    if k < 2 {
        return Err(Error::InvalidArgument(format!("ctc needs at least one gloss besides blank, got {k} classes")));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("ctc logits".into()));
    }
    let mut out = Vec::with_capacity(t * k);
    for row in logits.data().chunks_exact(k) {
        let m = row.iter().map(|v| v.to_f64().unwrap()).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v.to_f64().unwrap() - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v.to_f64().unwrap() - lse));
    }
    Ok((t, k, out))
}

fn check_target(target: &[usize], classes: usize, blank: usize) -> Result<()> {
    if blank >= classes {
        return Err(Error::InvalidArgument(format!("blank {blank} out of {classes} classes")));
    }
    match target.iter().find(|&&tok| tok >= classes || tok == blank) {
        Some(tok) => Err(Error::InvalidArgument(format!("target token {tok} is blank or outside {classes} classes"))),
        None => Ok(()),
    }
}

/// Minimum number of frames that can emit `target`.
pub fn min_alignment_length(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood of `target` under per-step `logits`.
pub fn ctc_loss<S: Scalar>(logits: &Tensor<S>, target: &[usize], blank: usize) -> Result<CtcOutput> {
    let (t, k, lp) = log_softmax_rows(logits)?;
    check_target(target, k, blank)?;
    let mut grad = Tensor::zeros([t, k]);
    if t == 0 || min_alignment_length(target) > t {
        return Ok(CtcOutput { loss: f64::INFINITY, grad, feasible: false });
    }
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s.is_multiple_of(2) { blank } else { target[s / 2] };
    let skip = |s: usize| s >= 2 && s % 2 == 1 && label(s) != label(s - 2);
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t * s_len];
    alpha[0] = lp[label(0)];
    if s_len > 1 {
        alpha[1] = lp[label(1)];
    }
    for ti in 1..t {
        for s in 0..s_len {
            let mut a = alpha[(ti - 1) * s_len + s];
            if s >= 1 {
                a = log_sum_exp(a, alpha[(ti - 1) * s_len + s - 1]);
            }
            if skip(s) {
                a = log_sum_exp(a, alpha[(ti - 1) * s_len + s - 2]);
            }
            alpha[ti * s_len + s] = a + lp[ti * k + label(s)];
        }
    }
    let mut beta = vec![ninf; t * s_len];
    let last = (t - 1) * s_len;
    beta[last + s_len - 1] = lp[(t - 1) * k + label(s_len - 1)];
    if s_len > 1 {
        beta[last + s_len - 2] = lp[(t - 1) * k + label(s_len - 2)];
    }
    for ti in (0..t - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[(ti + 1) * s_len + s];
            if s + 1 < s_len {
                b = log_sum_exp(b, beta[(ti + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                b = log_sum_exp(b, beta[(ti + 1) * s_len + s + 2]);
            }
            beta[ti * s_len + s] = b + lp[ti * k + label(s)];
        }
    }
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_sum_exp(log_p, alpha[last + s_len - 2]);
    }

    // alpha * beta double-counts the emission at (t, s).
    let gd = grad.data_mut();
    for ti in 0..t {
        let mut occ = vec![ninf; k];
        for s in 0..s_len {
            let ab = alpha[ti * s_len + s] + beta[ti * s_len + s] - lp[ti * k + label(s)];
            occ[label(s)] = log_sum_exp(occ[label(s)], ab);
        }
        for c in 0..k {
            gd[ti * k + c] = lp[ti * k + c].exp() - (occ[c] - log_p).exp();
        }
    }
    Ok(CtcOutput { loss: -log_p, grad, feasible: true })
}

/// Records the CTC loss of `logits: [T', V+1]` on `g`.
///
/// Infeasible targets yield an infinite loss value with a zero gradient.
pub fn ctc_loss_var<S: Scalar>(
    g: &mut Graph<'_, S>,
    logits: Var,
    target: &[usize],
    blank: usize,
) -> Result<(Var, CtcOutput)> {
    let out = ctc_loss(g.value(logits), target, blank)?;
    let grad = out.grad.cast::<S>();
    let v = g.custom_scalar(logits, S::of(out.loss), grad)?;
    Ok((v, out))
}

/// Maximum number of label paths [`ctc_brute_force`] will enumerate.
pub const BRUTE_FORCE_BUDGET: u64 = 1 << 24;

/// Collapses a frame-level path: merge repeats, then drop blanks.
pub fn collapse_path(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// CTC loss by explicit enumeration of every `(V+1)^{T'}` path.
pub fn ctc_brute_force<S: Scalar>(logits: &Tensor<S>, target: &[usize], blank: usize) -> Result<f64> {
    let (t, k, lp) = log_softmax_rows(logits)?;
    check_target(target, k, blank)?;
    let paths = (k as u64).checked_pow(t as u32);
    if t > 10 || target.len() > 4 || paths.is_none_or(|p| p > BRUTE_FORCE_BUDGET) {
        return Err(Error::BudgetExceeded(format!("{k}^{t} paths for a target of {} tokens", target.len())));
    }
    let mut path = vec![0usize; t];
    let mut total = 0.0f64;
    loop {
        if collapse_path(&path, blank) == target {
            let log_prob: f64 = path.iter().enumerate().map(|(ti, &c)| lp[ti * k + c]).sum();
            total += log_prob.exp();
        }
        // Odometer increment, last step fastest.
        let mut pos = t;
        loop {
            if pos == 0 {
                return Ok(-total.ln());
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < k {
                break;
            }
            path[pos] = 0;
        }
    }
}
