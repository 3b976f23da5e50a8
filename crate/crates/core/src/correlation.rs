//! Compressed spatial-temporal correlation.
//!
//! Each frame is condensed into one descriptor `x_p` (a learned mix of
//! average, max and query-attention pooling). The descriptor is correlated
//! with every spatial position of `L` neighbouring frames, the correlation
//! maps are gated to `(-0.5, 0.5)`, and the gated maps re-weight the
//! neighbour features into per-frame trajectory features `E: [T, C, 1, 1]`.
//! Cost is `O(HW)` per frame instead of the `O(H^2 W^2)` full pairwise
//! affinity, which is kept here as [`legacy_pairwise_affinity`] for reference.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{shape_err, Result};
use crate::ops::{self, PoolMode};
use crate::tensor::{Scalar, Tensor};

/// Parameters of one correlation module.
///
/// Projection matrices are stored `[in, out]` and applied to row vectors.
#[derive(Clone, Debug)]
pub struct CorrelationParams {
    pub channels: usize,
    pub window: usize,
    /// Fusion weights for (avg, max, attention) descriptors.
    pub gamma: ParamId,
    /// Per-neighbour-slot weights, length `window`.
    pub beta: ParamId,
    /// Attention query, `[C]`.
    pub query: ParamId,
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub w_out: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

/// Per-frame compact descriptors, each `[T, C, 1, 1]`.
#[derive(Clone, Debug)]
pub struct CompactDescriptor<S> {
    pub x_avg: Tensor<S>,
    pub x_max: Tensor<S>,
    pub x_att: Tensor<S>,
    pub x_p: Tensor<S>,
}

/// `L` temporal neighbours of every frame.
#[derive(Clone, Debug)]
pub struct NeighborSet<S> {
    /// `[T, C, L, H, W]`.
    pub x_l: Tensor<S>,
    /// Signed frame offset of each slot, ascending, zero excluded.
    pub offsets: Vec<isize>,
}

/// Raw and gated correlation maps, each `[T, L, H, W]`.
#[derive(Clone, Debug)]
pub struct CorrelationMaps<S> {
    pub a_l: Tensor<S>,
    pub a_hat: Tensor<S>,
}

/// Full pairwise affinity between two frames, `[H, W, H, W]`.
#[derive(Clone, Debug)]
pub struct AffinityVolume<S>(pub Tensor<S>);

/// Graph handles produced by [`CorrelationParams::forward`].
#[derive(Clone, Copy, Debug)]
pub struct CorrelationVars {
    /// Trajectory features, `[T, C, 1, 1]`.
    pub e: Var,
    /// Gated correlation maps, `[T, L, H, W]`.
    pub a_hat: Var,
    pub x_p: Var,
}

impl CorrelationParams {
    /// Registers parameters under `prefix`. `gamma` starts at 1/3 each and
    /// `beta` at `1 / window` each.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        channels: usize,
        window: usize,
        rng: &mut R,
    ) -> Result<Self> {
        ops::window_offsets(window)?;
        let c = channels;
        let std = 1.0 / (c as f64).sqrt();
        let mut mat = |name: &str, rng: &mut R| store.add(format!("{prefix}.{name}"), Tensor::randn([c, c], std, rng));
        let w_query = mat("w_query", rng);
        let w_key = mat("w_key", rng);
        let w_value = mat("w_value", rng);
        let w_out = mat("w_out", rng);
        let mlp_w1 = mat("mlp_w1", rng);
        let mlp_w2 = mat("mlp_w2", rng);
        Ok(Self {
            channels,
            window,
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full([3], S::one() / S::of(3.0))),
            beta: store.add(format!("{prefix}.beta"), Tensor::full([window], S::one() / S::of(window as f64))),
            query: store.add(format!("{prefix}.query"), Tensor::randn([c], 1.0, rng)),
            w_query,
            w_key,
            w_value,
            w_out,
            mlp_w1,
            mlp_b1: store.add(format!("{prefix}.mlp_b1"), Tensor::zeros([c])),
            mlp_w2,
            mlp_b2: store.add(format!("{prefix}.mlp_b2"), Tensor::zeros([c])),
        })
    }

    fn check_input<S: Scalar>(&self, g: &Graph<'_, S>, x: Var) -> Result<[usize; 4]> {
        let dims = ops::dims4("correlation", g.value(x))?;
        if dims[1] != self.channels {
            return Err(shape_err(
                "correlation",
                format!("module has {} channels, input has {}", self.channels, dims[1]),
            ));
        }
        Ok(dims)
    }

    /// Query attention over the `H*W` patches of each frame followed by the
    /// MLP. Returns `[T, C]`.
    ///
    /// Scores are `(q W_q) . (x_s W_k) / sqrt(C)`, evaluated as
    /// `x_s . (W_k (q W_q)^T)` so the keys are never materialized; likewise
    /// the softmax-weighted patch sum is taken before the value projection.
    pub fn attention_pool<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let [t, c, h, w] = self.check_input(g, x)?;
        let flat = g.reshape(x, &[t, c, h * w])?;
        let q = g.param(self.query);
        let q = g.reshape(q, &[1, c])?;
        let wq = g.param(self.w_query);
        let q = g.matmul(q, wq)?;
        let q = g.reshape(q, &[c, 1])?;
        let wk = g.param(self.w_key);
        let key_dir = g.matmul(wk, q)?;
        let key_dir = g.reshape(key_dir, &[c])?;
        let scores = g.frame_dot(flat, key_dir)?;
        let scores = g.scale_const(scores, S::one() / S::of(c as f64).sqrt());
        let attn = g.softmax(scores)?;
        let pooled = g.frame_weighted_sum(flat, attn)?;
        let wv = g.param(self.w_value);
        let v = g.matmul(pooled, wv)?;
        let wo = g.param(self.w_out);
        let mha = g.matmul(v, wo)?;
        let w1 = g.param(self.mlp_w1);
        let b1 = g.param(self.mlp_b1);
        let hidden = g.matmul(mha, w1)?;
        let hidden = g.add_row_bias(hidden, b1)?;
        let hidden = g.relu(hidden);
        let w2 = g.param(self.mlp_w2);
        let b2 = g.param(self.mlp_b2);
        let out = g.matmul(hidden, w2)?;
        g.add_row_bias(out, b2)
    }

    /// Returns `(x_avg, x_max, x_att, x_p)`, each `[T, C]`.
    fn descriptors<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<[Var; 4]> {
        let [t, c, _, _] = self.check_input(g, x)?;
        let avg = g.pool_spatial(x, PoolMode::Avg)?;
        let avg = g.reshape(avg, &[t, c])?;
        let max = g.pool_spatial(x, PoolMode::Max)?;
        let max = g.reshape(max, &[t, c])?;
        let att = self.attention_pool(g, x)?;
        let gamma = g.param(self.gamma);
        let a = g.scale_by(avg, gamma, 0)?;
        let m = g.scale_by(max, gamma, 1)?;
        let n = g.scale_by(att, gamma, 2)?;
        let p = g.add(a, m)?;
        let p = g.add(p, n)?;
        Ok([avg, max, att, p])
    }

    /// Records the whole module on `g` for `x: [T, C, H, W]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<CorrelationVars> {
        let [t, c, h, w] = self.check_input(g, x)?;
        let [_, _, _, x_p] = self.descriptors(g, x)?;
        let offsets = ops::window_offsets(self.window)?;
        let l = offsets.len();
        let x_l = g.gather_frames(x, &offsets)?;
        let x_l = g.reshape(x_l, &[t, c, l * h * w])?;
        let a_l = g.frame_dot(x_l, x_p)?;
        let a_l = g.reshape(a_l, &[t, l, h, w])?;
        let a_hat = g.gate(a_l);
        let beta = g.param(self.beta);
        let weights = g.scale_slots(a_hat, beta)?;
        let weights = g.reshape(weights, &[t, l * h * w])?;
        let e = g.frame_weighted_sum(x_l, weights)?;
        let e = g.reshape(e, &[t, c, 1, 1])?;
        Ok(CorrelationVars { e, a_hat, x_p })
    }

    /// Condenses each frame into its compact descriptors.
    pub fn compress_frames<S: Scalar>(&self, store: &ParamStore<S>, x: &Tensor<S>) -> Result<CompactDescriptor<S>> {
        let mut g = Graph::new(store);
        let xv = g.input(x.clone());
        let [t, c, _, _] = ops::dims4("compress_frames", x)?;
        let vars = self.descriptors(&mut g, xv)?;
        let [x_avg, x_max, x_att, x_p] = vars.map(|v| g.value(v).clone().reshape([t, c, 1, 1]));
        Ok(CompactDescriptor { x_avg: x_avg?, x_max: x_max?, x_att: x_att?, x_p: x_p? })
    }

    /// Trajectory features `E: [T, C, 1, 1]` for `x: [T, C, H, W]`.
    pub fn correlation_forward<S: Scalar>(&self, store: &ParamStore<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new(store);
        let xv = g.input(x.clone());
        let out = self.forward(&mut g, xv)?;
        Ok(g.value(out.e).clone())
    }
}

/// Gathers `L` neighbours per frame with symmetric offsets and edge clamping.
pub fn sample_neighbors<S: Scalar>(x: &Tensor<S>, window: usize) -> Result<NeighborSet<S>> {
    let offsets = ops::window_offsets(window)?;
    let x_l = ops::gather_frames(x, &offsets)?;
    Ok(NeighborSet { x_l, offsets })
}

fn neighbor_dims<S: Scalar>(n: &NeighborSet<S>) -> Result<[usize; 5]> {
    match n.x_l.shape() {
        &[t, c, l, h, w] if l == n.offsets.len() => Ok([t, c, l, h, w]),
        s => Err(shape_err("neighbours", format!("expected [T, C, L, H, W], got {s:?}"))),
    }
}

/// `A_L(t, l, s) = sum_c x_p(t, c) x_L(t, c, l, s)` and its gate `sigmoid(A_L) - 0.5`.
pub fn correlation_maps<S: Scalar>(
    desc: &CompactDescriptor<S>,
    neighbors: &NeighborSet<S>,
) -> Result<CorrelationMaps<S>> {
    let [t, c, l, h, w] = neighbor_dims(neighbors)?;
    if desc.x_p.len() != t * c || desc.x_p.shape().first() != Some(&t) {
        return Err(shape_err(
            "correlation_maps",
            format!("descriptor {:?} vs neighbours {:?}", desc.x_p.shape(), neighbors.x_l.shape()),
        ));
    }
    let x_l = neighbors.x_l.clone().reshape([t, c, l * h * w])?;
    let x_p = desc.x_p.clone().reshape([t, c])?;
    let a_l = ops::frame_dot(&x_l, &x_p)?.reshape([t, l, h, w])?;
    let a_hat = a_l.map(ops::gate);
    Ok(CorrelationMaps { a_l, a_hat })
}

/// `E(t, c) = sum_l beta_l sum_s A_hat(t, l, s) x_L(t, c, l, s)`, shaped `[T, C, 1, 1]`.
pub fn trajectory_features<S: Scalar>(
    maps: &CorrelationMaps<S>,
    neighbors: &NeighborSet<S>,
    beta: &Tensor<S>,
) -> Result<Tensor<S>> {
    let [t, c, l, h, w] = neighbor_dims(neighbors)?;
    if beta.len() != l {
        return Err(shape_err("trajectory_features", format!("{} weights for {l} neighbours", beta.len())));
    }
    if maps.a_hat.shape() != [t, l, h, w] {
        return Err(shape_err(
            "trajectory_features",
            format!("maps {:?} vs neighbours {:?}", maps.a_hat.shape(), neighbors.x_l.shape()),
        ));
    }
    let plane = h * w;
    let mut weights = maps.a_hat.clone().reshape([t, l * plane])?;
    for (k, chunk) in weights.data_mut().chunks_exact_mut(plane.max(1)).enumerate() {
        let b = beta.data()[k % l];
        for v in chunk {
            *v *= b;
        }
    }
    let x_l = neighbors.x_l.clone().reshape([t, c, l * plane])?;
    ops::frame_weighted_sum(&x_l, &weights)?.reshape([t, c, 1, 1])
}

/// Full pairwise affinity `A(i, j, i', j') = (1/C) sum_c p_t^c(i, j) p_{t+1}^c(i', j')`.
pub fn legacy_pairwise_affinity<S: Scalar>(frame_t: &Tensor<S>, frame_t1: &Tensor<S>) -> Result<AffinityVolume<S>> {
    frame_t.expect_same_shape("legacy_pairwise_affinity", frame_t1)?;
    let (c, h, w) = match frame_t.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(shape_err("legacy_pairwise_affinity", format!("expected [C, H, W], got {s:?}"))),
    };
    let s = h * w;
    // [S, C] x [C, S] with the first frame transposed in place via strides.
    let mut out = vec![S::zero(); s * s];
    S::gemm(s, c, s, frame_t.data(), (1, s), frame_t1.data(), (s, 1), S::zero(), &mut out, (s, 1));
    let inv = S::one() / S::of(c as f64);
    for v in &mut out {
        *v *= inv;
    }
    Ok(AffinityVolume(Tensor::new([h, w, h, w], out)?))
}
