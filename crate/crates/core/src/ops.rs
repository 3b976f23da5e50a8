//! Value-level primitives shared by the autodiff graph and the module APIs.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Spatial reduction mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Collapses the two trailing (spatial) axes to `1 x 1`.
pub fn pool_spatial<S: Scalar>(input: &Tensor<S>, mode: PoolMode) -> Result<Tensor<S>> {
    Ok(pool_spatial_with_argmax(input, mode)?.0)
}

/// Pooling plus, for `Max`, the flat index of the first maximum of each plane.
pub(crate) fn pool_spatial_with_argmax<S: Scalar>(
    input: &Tensor<S>,
    mode: PoolMode,
) -> Result<(Tensor<S>, Vec<usize>)> {
    let shape = input.shape();
    if shape.len() < 2 {
        return Err(shape_err("pool_spatial", format!("need two spatial axes, got {shape:?}")));
    }
    let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
    if plane == 0 {
        return Err(Error::InvalidArgument("pool_spatial over an empty spatial extent".into()));
    }
    let mut out_shape = shape.to_vec();
    let r = out_shape.len();
    out_shape[r - 2] = 1;
    out_shape[r - 1] = 1;
    let mut out = Vec::with_capacity(input.len() / plane);
    let mut argmax = Vec::new();
    for (p, chunk) in input.data().chunks_exact(plane).enumerate() {
        match mode {
            PoolMode::Avg => out.push(chunk.iter().copied().sum::<S>() / S::of(plane as f64)),
            PoolMode::Max => {
                let (best, &v) =
                    chunk.iter().enumerate().fold((0, &chunk[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
                out.push(v);
                argmax.push(p * plane + best);
            }
        }
    }
    Ok((Tensor::new(out_shape, out)?, argmax))
}

/// Numerically stable softmax over the last axis.
pub fn softmax_lastaxis<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let n = *input.shape().last().ok_or_else(|| shape_err("softmax", "rank-0 input"))?;
    let mut out = input.clone();
    if n == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_exact_mut(n) {
        let m = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let mut z = S::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Largest representable value strictly below one half.
#[inline]
pub fn gate_bound<S: Scalar>() -> S {
    S::of(0.5) - S::epsilon() / S::of(4.0)
}

/// `sigmoid(x) - 0.5`, kept strictly inside `(-0.5, 0.5)` even where the
/// sigmoid saturates to 0 or 1 in floating point.
#[inline]
pub fn gate<S: Scalar>(x: S) -> S {
    let b = gate_bound::<S>();
    (sigmoid(x) - S::of(0.5)).max(-b).min(b)
}

/// Frame index of each neighbour slot: `clamp(t + offset, 0, T - 1)`.
pub fn neighbor_index(t: usize, offset: isize, frames: usize) -> usize {
    (t as isize + offset).clamp(0, frames as isize - 1) as usize
}

/// Symmetric offsets `-L/2..=-1, 1..=L/2` in ascending order.
pub fn window_offsets(window: usize) -> Result<Vec<isize>> {
    if window < 2 || !window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("neighbour window must be even and >= 2, got {window}")));
    }
    let half = (window / 2) as isize;
    Ok((-half..=half).filter(|&o| o != 0).collect())
}

/// `[T, C, H, W]` -> `[T, C, L, H, W]` with `out[t, c, l] = x[clamp(t + off_l), c]`.
pub(crate) fn gather_frames<S: Scalar>(x: &Tensor<S>, offsets: &[isize]) -> Result<Tensor<S>> {
    let [t_len, c, h, w] = dims4("gather_frames", x)?;
    let plane = h * w;
    let l_len = offsets.len();
    let mut out = Vec::with_capacity(t_len * c * l_len * plane);
    for t in 0..t_len {
        for ch in 0..c {
            for &off in offsets {
                let src = neighbor_index(t, off, t_len);
                let base = (src * c + ch) * plane;
                out.extend_from_slice(&x.data()[base..base + plane]);
            }
        }
    }
    Tensor::new([t_len, c, l_len, h, w], out)
}

pub(crate) fn gather_frames_backward<S: Scalar>(
    dy: &Tensor<S>,
    x_shape: &[usize],
    offsets: &[isize],
) -> Result<Tensor<S>> {
    let mut dx = Tensor::zeros(x_shape);
    let [t_len, c, h, w] = dims4("gather_frames", &dx)?;
    let plane = h * w;
    let mut k = 0;
    for t in 0..t_len {
        for ch in 0..c {
            for &off in offsets {
                let src = neighbor_index(t, off, t_len);
                let base = (src * c + ch) * plane;
                for (d, &g) in dx.data_mut()[base..base + plane].iter_mut().zip(&dy.data()[k..k + plane]) {
                    *d += g;
                }
                k += plane;
            }
        }
    }
    Ok(dx)
}

pub(crate) fn dims4<S: Scalar>(op: &'static str, x: &Tensor<S>) -> Result<[usize; 4]> {
    match x.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(shape_err(op, format!("expected [T, C, H, W], got {s:?}"))),
    }
}

/// Splits a tensor of shape `[B, C, ...]` into `(B, C, rest)`.
pub(crate) fn split_bcs(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(op, format!("need at least [B, C], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// `out[b, s] = sum_c w[b, c] * x[b, c, s]`; `w` may also be a shared `[C]` vector.
pub(crate) fn frame_dot<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>) -> Result<Tensor<S>> {
    let (b_len, c, s) = split_bcs("frame_dot", x.shape())?;
    let shared = check_frame_weights("frame_dot", w, b_len, c)?;
    let mut out = vec![S::zero(); b_len * s];
    for b in 0..b_len {
        let row = &mut out[b * s..(b + 1) * s];
        for ch in 0..c {
            let wv = if shared { w.data()[ch] } else { w.data()[b * c + ch] };
            let xs = &x.data()[(b * c + ch) * s..(b * c + ch + 1) * s];
            for (o, &xv) in row.iter_mut().zip(xs) {
                *o += wv * xv;
            }
        }
    }
    let mut shape = vec![b_len];
    shape.extend_from_slice(&x.shape()[2..]);
    Tensor::new(shape, out)
}

fn check_frame_weights<S: Scalar>(op: &'static str, w: &Tensor<S>, b: usize, c: usize) -> Result<bool> {
    let flat: usize = w.len();
    if w.rank() == 1 && flat == c {
        Ok(true)
    } else if w.shape().first() == Some(&b) && flat == b * c {
        Ok(false)
    } else {
        Err(shape_err(op, format!("weights {:?} for {b} frames of {c} channels", w.shape())))
    }
}

/// Gradients of [`frame_dot`] with respect to `x` and `w`.
pub(crate) fn frame_dot_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (b_len, c, s) = split_bcs("frame_dot", x.shape())?;
    let shared = check_frame_weights("frame_dot", w, b_len, c)?;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    for b in 0..b_len {
        let g = &dy.data()[b * s..(b + 1) * s];
        for ch in 0..c {
            let wi = if shared { ch } else { b * c + ch };
            let wv = w.data()[wi];
            let range = (b * c + ch) * s..(b * c + ch + 1) * s;
            let mut acc = S::zero();
            for ((d, &xv), &gv) in dx.data_mut()[range.clone()].iter_mut().zip(&x.data()[range]).zip(g) {
                *d = wv * gv;
                acc += xv * gv;
            }
            dw.data_mut()[wi] += acc;
        }
    }
    Ok((dx, dw))
}

/// `out[b, c] = sum_s p[b, s] * x[b, c, s]`.
pub(crate) fn frame_weighted_sum<S: Scalar>(x: &Tensor<S>, p: &Tensor<S>) -> Result<Tensor<S>> {
    let (b_len, c, s) = split_bcs("frame_weighted_sum", x.shape())?;
    if p.len() != b_len * s || p.shape().first() != Some(&b_len) {
        return Err(shape_err("frame_weighted_sum", format!("weights {:?} for x {:?}", p.shape(), x.shape())));
    }
    let mut out = vec![S::zero(); b_len * c];
    for b in 0..b_len {
        let pw = &p.data()[b * s..(b + 1) * s];
        for ch in 0..c {
            let xs = &x.data()[(b * c + ch) * s..(b * c + ch + 1) * s];
            out[b * c + ch] = xs.iter().zip(pw).map(|(&a, &q)| a * q).sum();
        }
    }
    Tensor::new([b_len, c], out)
}

pub(crate) fn frame_weighted_sum_backward<S: Scalar>(
    x: &Tensor<S>,
    p: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (b_len, c, s) = split_bcs("frame_weighted_sum", x.shape())?;
    let mut dx = Tensor::zeros(x.shape());
    let mut dp = Tensor::zeros(p.shape());
    for b in 0..b_len {
        for ch in 0..c {
            let g = dy.data()[b * c + ch];
            let range = (b * c + ch) * s..(b * c + ch + 1) * s;
            let xs = &x.data()[range.clone()];
            for (((d, &xv), &pv), dpv) in dx.data_mut()[range]
                .iter_mut()
                .zip(xs)
                .zip(&p.data()[b * s..(b + 1) * s])
                .zip(dp.data_mut()[b * s..(b + 1) * s].iter_mut())
            {
                *d = pv * g;
                *dpv += xv * g;
            }
        }
    }
    Ok((dx, dp))
}

/// Multiplies `x: [T, C, H, W]` by `g: [T, C]` or `[T, C, 1, 1]` broadcast over space.
pub(crate) fn mul_spatial<S: Scalar>(x: &Tensor<S>, g: &Tensor<S>) -> Result<Tensor<S>> {
    let [t, c, h, w] = dims4("spatial broadcast", x)?;
    check_spatial_gain(x, g, t, c)?;
    let plane = h * w;
    let mut out = x.clone();
    for (k, chunk) in out.data_mut().chunks_exact_mut(plane.max(1)).enumerate() {
        let gv = g.data()[k];
        for v in chunk {
            *v *= gv;
        }
    }
    Ok(out)
}

fn check_spatial_gain<S: Scalar>(x: &Tensor<S>, g: &Tensor<S>, t: usize, c: usize) -> Result<()> {
    let ok = match g.shape() {
        [a, b] => *a == t && *b == c,
        [a, b, 1, 1] => *a == t && *b == c,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(shape_err("spatial broadcast", format!("cannot broadcast {:?} over {:?}", g.shape(), x.shape())))
    }
}

pub(crate) fn mul_spatial_backward<S: Scalar>(
    x: &Tensor<S>,
    g: &Tensor<S>,
    dy: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let dx = mul_spatial(dy, g)?;
    let [_, _, h, w] = dims4("spatial broadcast", x)?;
    let plane = h * w;
    let mut dg = Tensor::zeros(g.shape());
    for (k, (xs, gs)) in x.data().chunks_exact(plane.max(1)).zip(dy.data().chunks_exact(plane.max(1))).enumerate() {
        dg.data_mut()[k] = xs.iter().zip(gs).map(|(&a, &b)| a * b).sum();
    }
    Ok((dx, dg))
}

/// Max pooling with kernel 2, stride 2 along the leading (time) axis of `[T, C]`.
pub(crate) fn max_pool_time<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, Vec<usize>)> {
    let (t, c) = match x.shape() {
        &[t, c] => (t, c),
        s => return Err(shape_err("max_pool_time", format!("expected [T, C], got {s:?}"))),
    };
    let t_out = t / 2;
    let mut out = Vec::with_capacity(t_out * c);
    let mut arg = Vec::with_capacity(t_out * c);
    for to in 0..t_out {
        for ch in 0..c {
            let a = (2 * to) * c + ch;
            let b = (2 * to + 1) * c + ch;
            let (i, v) = if x.data()[b] > x.data()[a] { (b, x.data()[b]) } else { (a, x.data()[a]) };
            out.push(v);
            arg.push(i);
        }
    }
    Ok((Tensor::new([t_out, c], out)?, arg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plane(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64([1, 1, 2, 2], v).unwrap()
    }

    #[test]
    fn pool_examples() {
        let p = plane(&[1., 2., 3., 4.]);
        assert_eq!(pool_spatial(&p, PoolMode::Avg).unwrap().item(), 2.5);
        assert_eq!(pool_spatial(&p, PoolMode::Max).unwrap().item(), 4.0);
        let c = plane(&[0.7; 4]);
        for mode in [PoolMode::Avg, PoolMode::Max] {
            assert!((pool_spatial(&c, mode).unwrap().item() - 0.7).abs() < 1e-15);
        }
        assert!(pool_spatial(&Tensor::<f64>::zeros([2, 3, 0, 4]), PoolMode::Avg).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_lastaxis(&Tensor::<f64>::zeros([3])).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_lastaxis(&Tensor::<f64>::from_f64([2], &[2f64.ln(), 0.0]).unwrap()).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn gate_is_strict_under_saturation() {
        for x in [-1e30f32, -100.0, -20.0, 20.0, 100.0, 1e30] {
            let g = gate(x);
            assert!(g > -0.5 && g < 0.5, "{x} -> {g}");
        }
        for x in [-1e300f64, -40.0, 40.0, 1e300] {
            let g = gate(x);
            assert!(g > -0.5 && g < 0.5, "{x} -> {g}");
        }
        assert_eq!(gate(0.0f64), 0.0);
    }

    #[test]
    fn offsets_are_symmetric_and_exclude_zero() {
        assert_eq!(window_offsets(2).unwrap(), vec![-1, 1]);
        assert_eq!(window_offsets(6).unwrap(), vec![-3, -2, -1, 1, 2, 3]);
        assert!(window_offsets(3).is_err());
        assert!(window_offsets(0).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            v in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let x = Tensor::<f64>::from_f64([v.len()], &v).unwrap();
            let s = softmax_lastaxis(&x).unwrap();
            prop_assert!((s.sum() - 1.0).abs() < 1e-6);
            prop_assert!(s.data().iter().all(|&p| p >= 0.0));
            let shifted = softmax_lastaxis(&x.map(|a| a + shift)).unwrap();
            prop_assert!(s.max_abs_diff(&shifted).unwrap() < 1e-9);
        }

        #[test]
        fn pooling_ignores_spatial_order(
            v in proptest::collection::vec(-5.0f64..5.0, 9),
            perm in Just((0..9).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let x = Tensor::<f64>::from_f64([1, 1, 3, 3], &v).unwrap();
            let pv: Vec<f64> = perm.iter().map(|&i| v[i]).collect();
            let y = Tensor::<f64>::from_f64([1, 1, 3, 3], &pv).unwrap();
            for mode in [PoolMode::Avg, PoolMode::Max] {
                let a = pool_spatial(&x, mode).unwrap().item();
                let b = pool_spatial(&y, mode).unwrap().item();
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
