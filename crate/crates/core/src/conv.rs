//! Grouped, dilated, strided convolution over a `[T, C, H, W]` frame layout.
//!
//! One kernel covers the three cases the network needs: temporal 1D
//! convolution (`[T, C]` or `[T, C, 1, 1]` input, kernel `k x 1 x 1`),
//! per-frame spatial 2D convolution (kernel `1 x k x k`) and full
//! spatio-temporal 3D convolution. Weights are `[C_out, C_in / groups, kt, kh, kw]`.
//! The operation is cross-correlation (kernels are not flipped), lowered to
//! im2col plus GEMM per group.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Zero-padding policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Symmetric zero padding of `dilation * (k - 1) / 2` per side, which
    /// preserves the extent at stride 1.
    Same,
    /// Explicit per-axis padding `(t, h, w)` applied on both sides.
    Explicit([usize; 3]),
}

/// Geometry of a convolution, axes ordered `(t, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub dilation: [usize; 3],
    pub stride: [usize; 3],
    pub groups: usize,
    pub padding: Padding,
}

impl ConvSpec {
    /// Temporal convolution with same-padding.
    pub fn temporal(k: usize, dilation: usize, groups: usize) -> Self {
        Self { kernel: [k, 1, 1], dilation: [dilation, 1, 1], stride: [1, 1, 1], groups, padding: Padding::Same }
    }

    /// Per-frame spatial convolution with same-padding.
    pub fn spatial(k: usize, stride: usize, groups: usize) -> Self {
        Self { kernel: [1, k, k], dilation: [1, 1, 1], stride: [1, stride, stride], groups, padding: Padding::Same }
    }

    /// Spatio-temporal convolution `kt x ks x ks` with dilation `(dt, ds, ds)`.
    pub fn spatiotemporal(kt: usize, ks: usize, dt: usize, ds: usize, groups: usize) -> Self {
        Self { kernel: [kt, ks, ks], dilation: [dt, ds, ds], stride: [1, 1, 1], groups, padding: Padding::Same }
    }

    /// `1 x 1 x 1` channel projection.
    pub fn pointwise() -> Self {
        Self::spatiotemporal(1, 1, 1, 1, 1)
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    fn pads(&self) -> [usize; 3] {
        match self.padding {
            Padding::Same => std::array::from_fn(|a| self.dilation[a] * (self.kernel[a] - 1) / 2),
            Padding::Explicit(p) => p,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::InvalidArgument("groups must be positive".into()));
        }
        for a in 0..3 {
            if self.kernel[a] == 0 || self.dilation[a] == 0 || self.stride[a] == 0 {
                return Err(Error::InvalidArgument(format!(
                    "kernel, dilation and stride must be >= 1 on every axis: {self:?}"
                )));
            }
            if self.padding == Padding::Same && !(self.dilation[a] * (self.kernel[a] - 1)).is_multiple_of(2) {
                return Err(Error::InvalidArgument(format!(
                    "same padding needs an even dilated extent on axis {a}: {self:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Resolved sizes for one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub inp: [usize; 3],
    pub out: [usize; 3],
    pub c_in: usize,
    pub c_out: usize,
    pad: [usize; 3],
}

impl Geometry {
    fn cin_per_group(&self, spec: &ConvSpec) -> usize {
        self.c_in / spec.groups
    }

    fn cout_per_group(&self, spec: &ConvSpec) -> usize {
        self.c_out / spec.groups
    }

    fn out_positions(&self) -> usize {
        self.out.iter().product()
    }
}

/// Checks shapes and returns the geometry. `x` is `[T, C, H, W]`; `w` is rank 5.
pub(crate) fn geometry(x_shape: &[usize], w_shape: &[usize], spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    if x_shape.len() != 4 {
        return Err(shape_err("conv", format!("input must be [T, C, H, W], got {x_shape:?}")));
    }
    if w_shape.len() != 5 {
        return Err(shape_err("conv", format!("kernel must be rank 5, got {w_shape:?}")));
    }
    let (c_in, c_out, g) = (x_shape[1], w_shape[0], spec.groups);
    if c_in % g != 0 || c_out % g != 0 {
        return Err(shape_err(
            "conv",
            format!("groups {g} must divide input channels {c_in} and output channels {c_out}"),
        ));
    }
    if w_shape[1] != c_in / g || w_shape[2..] != spec.kernel {
        return Err(shape_err(
            "conv",
            format!("kernel {w_shape:?} does not match {c_in} input channels, {g} groups, extents {:?}", spec.kernel),
        ));
    }
    let pad = spec.pads();
    let inp = [x_shape[0], x_shape[2], x_shape[3]];
    let mut out = [0; 3];
    for a in 0..3 {
        let span = spec.dilation[a] * (spec.kernel[a] - 1) + 1;
        let padded = inp[a] + 2 * pad[a];
        if padded < span {
            return Err(shape_err("conv", format!("axis {a}: padded extent {padded} smaller than kernel span {span}")));
        }
        out[a] = (padded - span) / spec.stride[a] + 1;
    }
    Ok(Geometry { inp, out, c_in, c_out, pad })
}

/// Source coordinate along one axis, or `None` inside the zero padding.
#[inline]
fn source(o: usize, tap: usize, stride: usize, dilation: usize, pad: usize, n: usize) -> Option<usize> {
    let pos = (o * stride + tap * dilation) as isize - pad as isize;
    (pos >= 0 && (pos as usize) < n).then_some(pos as usize)
}

/// Precomputed source indices per (tap, output position) for each axis.
fn axis_tables(geo: &Geometry, spec: &ConvSpec) -> [Vec<Option<usize>>; 3] {
    std::array::from_fn(|a| {
        let mut table = Vec::with_capacity(spec.kernel[a] * geo.out[a]);
        for tap in 0..spec.kernel[a] {
            for o in 0..geo.out[a] {
                table.push(source(o, tap, spec.stride[a], spec.dilation[a], geo.pad[a], geo.inp[a]));
            }
        }
        table
    })
}

/// Precomputed per-axis source tables plus, for the innermost axis, the
/// contiguous valid output range of each tap.
struct Tables {
    axes: [Vec<Option<usize>>; 3],
    w_valid: Vec<(usize, usize)>,
}

impl Tables {
    fn new(geo: &Geometry, spec: &ConvSpec) -> Self {
        let axes = axis_tables(geo, spec);
        let w_out = geo.out[2];
        let w_valid = (0..spec.kernel[2])
            .map(|d| {
                let col = &axes[2][d * w_out..(d + 1) * w_out];
                let lo = col.iter().position(Option::is_some).unwrap_or(w_out);
                let hi = col.iter().rposition(Option::is_some).map_or(lo, |i| i + 1);
                (lo, hi)
            })
            .collect();
        Self { axes, w_valid }
    }
}

/// Calls `f(tap_row, out_offset, in_offset, wo_lo, wo_hi)` for every
/// in-bounds output row of channel `c`; `in_offset` addresses the source
/// element of `wo_lo` and sources advance by the stride along `w`.
#[inline]
fn for_each_row(
    geo: &Geometry,
    spec: &ConvSpec,
    tables: &Tables,
    c: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    let [_, h_in, w_in] = geo.inp;
    let [t_out, h_out, w_out] = geo.out;
    let [kt, kh, kw] = spec.kernel;
    let frame = geo.c_in * h_in * w_in;
    let plane = h_in * w_in;
    let mut tap = 0;
    for a in 0..kt {
        for b in 0..kh {
            for d in 0..kw {
                let (lo, hi) = tables.w_valid[d];
                if lo < hi {
                    let w0 = tables.axes[2][d * w_out + lo].unwrap_or(0);
                    for to in 0..t_out {
                        let Some(ti) = tables.axes[0][a * t_out + to] else { continue };
                        for ho in 0..h_out {
                            let Some(hi_) = tables.axes[1][b * h_out + ho] else { continue };
                            let base = ti * frame + c * plane + hi_ * w_in;
                            f(tap, (to * h_out + ho) * w_out, base + w0, lo, hi);
                        }
                    }
                }
                tap += 1;
            }
        }
    }
}

/// Unfolds group `g` of `x` into `cols[(ci, kt, kh, kw), (to, ho, wo)]`.
fn im2col<S: Scalar>(x: &[S], geo: &Geometry, spec: &ConvSpec, tables: &Tables, g: usize, cols: &mut [S]) {
    let cpg = geo.cin_per_group(spec);
    let p_len = geo.out_positions();
    let taps = spec.kernel_volume();
    let sw = spec.stride[2];
    cols.fill(S::zero());
    for ci in 0..cpg {
        let c = g * cpg + ci;
        for_each_row(geo, spec, tables, c, |tap, out_off, in_off, lo, hi| {
            let row = (ci * taps + tap) * p_len + out_off;
            let dst = &mut cols[row + lo..row + hi];
            if sw == 1 {
                dst.copy_from_slice(&x[in_off..in_off + (hi - lo)]);
            } else {
                for (k, v) in dst.iter_mut().enumerate() {
                    *v = x[in_off + k * sw];
                }
            }
        });
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dx`.
fn col2im<S: Scalar>(cols: &[S], geo: &Geometry, spec: &ConvSpec, tables: &Tables, g: usize, dx: &mut [S]) {
    let cpg = geo.cin_per_group(spec);
    let p_len = geo.out_positions();
    let taps = spec.kernel_volume();
    let sw = spec.stride[2];
    for ci in 0..cpg {
        let c = g * cpg + ci;
        for_each_row(geo, spec, tables, c, |tap, out_off, in_off, lo, hi| {
            let row = (ci * taps + tap) * p_len + out_off;
            for (k, &v) in cols[row + lo..row + hi].iter().enumerate() {
                dx[in_off + k * sw] += v;
            }
        });
    }
}

/// Output offset of channel `oc` at flat position `p = (to, ho, wo)`.
#[inline]
fn out_offset(geo: &Geometry, oc: usize, row_off: usize) -> usize {
    let s_out = geo.out[1] * geo.out[2];
    let to = row_off / s_out;
    (to * geo.c_out + oc) * s_out + row_off % s_out
}

/// Depthwise (one input and one output channel per group) forward without im2col.
fn depthwise_forward<S: Scalar>(x: &[S], w: &[S], geo: &Geometry, spec: &ConvSpec, tables: &Tables, out: &mut [S]) {
    let taps = spec.kernel_volume();
    let sw = spec.stride[2];
    for c in 0..geo.c_in {
        let wc = &w[c * taps..(c + 1) * taps];
        for_each_row(geo, spec, tables, c, |tap, out_off, in_off, lo, hi| {
            let wv = wc[tap];
            let o = out_offset(geo, c, out_off);
            let dst = &mut out[o + lo..o + hi];
            if sw == 1 {
                for (d, &xv) in dst.iter_mut().zip(&x[in_off..in_off + (hi - lo)]) {
                    *d += wv * xv;
                }
            } else {
                for (k, d) in dst.iter_mut().enumerate() {
                    *d += wv * x[in_off + k * sw];
                }
            }
        });
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    dy: &[S],
    geo: &Geometry,
    spec: &ConvSpec,
    tables: &Tables,
    mut dx: Option<&mut [S]>,
    mut dw: Option<&mut [S]>,
) {
    let taps = spec.kernel_volume();
    let sw = spec.stride[2];
    for c in 0..geo.c_in {
        for_each_row(geo, spec, tables, c, |tap, out_off, in_off, lo, hi| {
            let o = out_offset(geo, c, out_off);
            let g = &dy[o + lo..o + hi];
            let n = hi - lo;
            if let Some(dw) = dw.as_deref_mut() {
                let acc = if sw == 1 {
                    g.iter().zip(&x[in_off..in_off + n]).fold(S::zero(), |a, (&gv, &xv)| a + gv * xv)
                } else {
                    g.iter().enumerate().fold(S::zero(), |a, (k, &gv)| a + gv * x[in_off + k * sw])
                };
                dw[c * taps + tap] += acc;
            }
            if let Some(dx) = dx.as_deref_mut() {
                let wv = w[c * taps + tap];
                if sw == 1 {
                    for (d, &gv) in dx[in_off..in_off + n].iter_mut().zip(g) {
                        *d += wv * gv;
                    }
                } else {
                    for (k, &gv) in g.iter().enumerate() {
                        dx[in_off + k * sw] += wv * gv;
                    }
                }
            }
        });
    }
}

fn is_depthwise(geo: &Geometry, spec: &ConvSpec) -> bool {
    spec.groups > 1 && geo.cin_per_group(spec) == 1 && geo.cout_per_group(spec) == 1
}

/// Forward convolution with optional per-output-channel bias.
pub(crate) fn forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    spec: &ConvSpec,
) -> Result<Tensor<S>> {
    let geo = geometry(x.shape(), w.shape(), spec)?;
    if let Some(b) = bias {
        if b.shape() != [geo.c_out] {
            return Err(shape_err("conv", format!("bias {:?} for {} channels", b.shape(), geo.c_out)));
        }
    }
    let [t_out, h_out, w_out] = geo.out;
    let s_out = h_out * w_out;
    let p_len = geo.out_positions();
    let cpg = geo.cin_per_group(spec);
    let opg = geo.cout_per_group(spec);
    let k_len = cpg * spec.kernel_volume();
    let mut out = vec![S::zero(); t_out * geo.c_out * s_out];
    let tables = Tables::new(&geo, spec);
    if is_depthwise(&geo, spec) {
        depthwise_forward(x.data(), w.data(), &geo, spec, &tables, &mut out);
        if let Some(b) = bias {
            for (k, chunk) in out.chunks_exact_mut(s_out.max(1)).enumerate() {
                let bv = b.data()[k % geo.c_out];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        return Tensor::new([t_out, geo.c_out, h_out, w_out], out);
    }
    let mut cols = vec![S::zero(); k_len * p_len];
    let mut tmp = vec![S::zero(); opg * p_len];
    for g in 0..spec.groups {
        im2col(x.data(), &geo, spec, &tables, g, &mut cols);
        let wg = &w.data()[g * opg * k_len..(g + 1) * opg * k_len];
        S::gemm(opg, k_len, p_len, wg, (k_len, 1), &cols, (p_len, 1), S::zero(), &mut tmp, (p_len, 1));
        for co in 0..opg {
            let oc = g * opg + co;
            let b = bias.map_or(S::zero(), |b| b.data()[oc]);
            for to in 0..t_out {
                let src = &tmp[co * p_len + to * s_out..co * p_len + (to + 1) * s_out];
                let dst = &mut out[(to * geo.c_out + oc) * s_out..(to * geo.c_out + oc + 1) * s_out];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
    }
    Tensor::new([t_out, geo.c_out, h_out, w_out], out)
}

/// Gradients of a convolution.
pub(crate) struct ConvGrads<S> {
    pub dx: Option<Tensor<S>>,
    pub dw: Option<Tensor<S>>,
    pub db: Option<Tensor<S>>,
}

pub(crate) fn backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    spec: &ConvSpec,
    dy: &Tensor<S>,
    need: (bool, bool, bool),
) -> Result<ConvGrads<S>> {
    let geo = geometry(x.shape(), w.shape(), spec)?;
    let [t_out, h_out, w_out] = geo.out;
    let s_out = h_out * w_out;
    let p_len = geo.out_positions();
    let cpg = geo.cin_per_group(spec);
    let opg = geo.cout_per_group(spec);
    let k_len = cpg * spec.kernel_volume();
    let (need_dx, need_dw, need_db) = need;

    let mut dx = need_dx.then(|| vec![S::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![S::zero(); w.len()]);
    let db = need_db.then(|| {
        let mut db = vec![S::zero(); geo.c_out];
        for to in 0..t_out {
            for (oc, acc) in db.iter_mut().enumerate() {
                let off = (to * geo.c_out + oc) * s_out;
                *acc += dy.data()[off..off + s_out].iter().copied().sum::<S>();
            }
        }
        db
    });

    let tables = Tables::new(&geo, spec);
    if (need_dx || need_dw) && is_depthwise(&geo, spec) {
        depthwise_backward(x.data(), w.data(), dy.data(), &geo, spec, &tables, dx.as_deref_mut(), dw.as_deref_mut());
    } else if need_dx || need_dw {
        let mut cols = vec![S::zero(); k_len * p_len];
        let mut dyg = vec![S::zero(); opg * p_len];
        for g in 0..spec.groups {
            for co in 0..opg {
                let oc = g * opg + co;
                for to in 0..t_out {
                    let off = (to * geo.c_out + oc) * s_out;
                    dyg[co * p_len + to * s_out..co * p_len + (to + 1) * s_out]
                        .copy_from_slice(&dy.data()[off..off + s_out]);
                }
            }
            if let Some(dw) = dw.as_mut() {
                im2col(x.data(), &geo, spec, &tables, g, &mut cols);
                let dwg = &mut dw[g * opg * k_len..(g + 1) * opg * k_len];
                S::gemm(opg, p_len, k_len, &dyg, (p_len, 1), &cols, (1, p_len), S::zero(), dwg, (k_len, 1));
            }
            if let Some(dx) = dx.as_mut() {
                let wg = &w.data()[g * opg * k_len..(g + 1) * opg * k_len];
                S::gemm(k_len, opg, p_len, wg, (1, k_len), &dyg, (p_len, 1), S::zero(), &mut cols, (p_len, 1));
                col2im(&cols, &geo, spec, &tables, g, dx);
            }
        }
    }
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        dw: dw.map(|d| Tensor::new(w.shape(), d)).transpose()?,
        db: db.map(|d| Tensor::new([geo.c_out], d)).transpose()?,
    })
}

/// Normalizes a user-facing input/kernel pair to the internal rank-4/rank-5 layout.
fn normalize<S: Scalar>(input: &Tensor<S>, kernel: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>, bool)> {
    match (input.rank(), kernel.rank()) {
        (2, 3) => {
            let (t, c) = (input.shape()[0], input.shape()[1]);
            let k = kernel.shape();
            Ok((input.clone().reshape([t, c, 1, 1])?, kernel.clone().reshape([k[0], k[1], k[2], 1, 1])?, true))
        }
        (4, 5) => Ok((input.clone(), kernel.clone(), false)),
        (4, 4) => {
            let k = kernel.shape();
            Ok((input.clone(), kernel.clone().reshape([k[0], k[1], 1, k[2], k[3]])?, false))
        }
        (a, b) => Err(shape_err("conv_nd", format!("unsupported input rank {a} with kernel rank {b}"))),
    }
}

/// Convolution without bias.
///
/// Accepted layouts: temporal `[T, C]` input with `[C_out, C_in/g, k]` kernel,
/// per-frame `[T, C, H, W]` with `[C_out, C_in/g, kh, kw]`, or spatio-temporal
/// `[T, C, H, W]` with `[C_out, C_in/g, kt, kh, kw]`. The kernel extents in
/// `spec` must match the kernel tensor.
pub fn conv_nd<S: Scalar>(input: &Tensor<S>, kernel: &Tensor<S>, spec: &ConvSpec) -> Result<Tensor<S>> {
    let (x, w, temporal) = normalize(input, kernel)?;
    let y = forward(&x, &w, None, spec)?;
    if temporal {
        let (t, c) = (y.shape()[0], y.shape()[1]);
        y.reshape([t, c])
    } else {
        Ok(y)
    }
}
