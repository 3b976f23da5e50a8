//! Central-difference gradient checking in `f64`.

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over every checked element of `|analytic - fd| / max(1, |fd|)`.
    pub max_rel_err: f64,
    /// Worst error per parameter, by name.
    pub per_param: Vec<(String, f64)>,
}

fn eval<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::NotScalar(v.shape().to_vec()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check_fd evaluation".into()));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with step `h` for every element of every parameter in `store`.
pub fn grad_check_fd<F>(store: &ParamStore<f64>, f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        if !g.value(out).all_finite() {
            return Err(Error::NonFinite("grad_check_fd evaluation".into()));
        }
        g.backward(out)?
    };
    let mut work = store.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, per_param: Vec::with_capacity(store.len()) };
    for id in store.ids() {
        let mut worst = 0.0f64;
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + h;
            let plus = eval(&work, &f)?;
            work.get_mut(id).data_mut()[k] = orig - h;
            let minus = eval(&work, &f)?;
            work.get_mut(id).data_mut()[k] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).data()[k];
            worst = worst.max((a - fd).abs() / fd.abs().max(1.0));
        }
        report.max_rel_err = report.max_rel_err.max(worst);
        report.per_param.push((store.name(id).to_string(), worst));
    }
    Ok(report)
}
