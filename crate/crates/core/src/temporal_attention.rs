//! Temporal attention: per-frame, per-channel gates from multi-scale
//! depthwise temporal convolutions over spatially pooled features.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::conv::ConvSpec;
use crate::error::{shape_err, Result};
use crate::ops::{self, PoolMode};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalAttentionConfig {
    pub channels: usize,
    pub reduction: usize,
    /// Number of branches `M_t`; branch `i` has dilation `i`.
    pub scales: usize,
    /// Base temporal kernel `P_t`.
    pub kernel: usize,
}

impl TemporalAttentionConfig {
    pub fn new(channels: usize) -> Self {
        Self { channels, reduction: 16, scales: 3, kernel: 3 }
    }

    pub fn reduced_channels(&self) -> usize {
        (self.channels / self.reduction).max(1)
    }

    pub fn branch_spec(&self, dilation: usize) -> ConvSpec {
        ConvSpec::temporal(self.kernel, dilation, self.reduced_channels())
    }
}

#[derive(Clone, Debug)]
pub struct TemporalAttentionParams {
    pub config: TemporalAttentionConfig,
    pub reduce: ParamId,
    pub branch_kernels: Vec<ParamId>,
    /// Branch coefficients `delta`, initialised to `1 / M_t`.
    pub delta: ParamId,
    pub recover: ParamId,
    pub recover_bias: ParamId,
    /// Residual gain, initialised to zero.
    pub lambda: ParamId,
}

impl TemporalAttentionParams {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        config: TemporalAttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (c, cr) = (config.channels, config.reduced_channels());
        let reduce =
            store.add(format!("{prefix}.reduce"), Tensor::randn([cr, c, 1, 1, 1], (1.0 / c as f64).sqrt(), rng));
        let branch_kernels = (1..=config.scales)
            .map(|i| {
                store.add(
                    format!("{prefix}.branch_d{i}"),
                    Tensor::randn([cr, 1, config.kernel, 1, 1], (1.0 / config.kernel as f64).sqrt(), rng),
                )
            })
            .collect();
        let m = config.scales;
        Ok(Self {
            config,
            reduce,
            branch_kernels,
            delta: store.add(format!("{prefix}.delta"), Tensor::full([m], S::one() / S::of(m as f64))),
            recover: store
                .add(format!("{prefix}.recover"), Tensor::randn([c, cr, 1, 1, 1], (1.0 / cr as f64).sqrt(), rng)),
            recover_bias: store.add(format!("{prefix}.recover_bias"), Tensor::zeros([c])),
            lambda: store.add(format!("{prefix}.lambda"), Tensor::zeros([1])),
        })
    }

    /// Pool, reduce and mix branches: `y -> y_m` with shape `[T, C/r, 1, 1]`.
    pub fn multiscale<S: Scalar>(&self, g: &mut Graph<'_, S>, y: Var) -> Result<Var> {
        let dims = ops::dims4("temporal_attention", g.value(y))?;
        if dims[1] != self.config.channels {
            return Err(shape_err(
                "temporal_attention",
                format!("module has {} channels, input has {}", self.config.channels, dims[1]),
            ));
        }
        let pooled = g.pool_spatial(y, PoolMode::Avg)?;
        let w = g.param(self.reduce);
        let y_r = g.conv(pooled, w, None, ConvSpec::pointwise())?;
        self.mix(g, y_r)
    }

    fn mix<S: Scalar>(&self, g: &mut Graph<'_, S>, y_r: Var) -> Result<Var> {
        let delta = g.param(self.delta);
        let mut acc: Option<Var> = None;
        for (k, &kernel) in self.branch_kernels.iter().enumerate() {
            let w = g.param(kernel);
            let b = g.conv(y_r, w, None, self.config.branch_spec(k + 1))?;
            let b = g.scale_by(b, delta, k)?;
            acc = Some(match acc {
                Some(a) => g.add(a, b)?,
                None => b,
            });
        }
        acc.ok_or_else(|| shape_err("temporal_attention", "no branches configured"))
    }

    /// `U = sigmoid(conv_1(y_m)) - 0.5`, shape `[T, C, 1, 1]`.
    pub fn maps<S: Scalar>(&self, g: &mut Graph<'_, S>, y_m: Var) -> Result<Var> {
        let w = g.param(self.recover);
        let b = g.param(self.recover_bias);
        let yb = g.conv(y_m, w, Some(b), ConvSpec::pointwise())?;
        Ok(g.gate(yb))
    }

    /// `z = y + lambda * (y * U)`.
    pub fn apply<S: Scalar>(&self, g: &mut Graph<'_, S>, y: Var, u: Var) -> Result<Var> {
        let yu = g.mul_spatial(y, u)?;
        let lambda = g.param(self.lambda);
        let scaled = g.scale_by(yu, lambda, 0)?;
        g.add(y, scaled)
    }

    /// Returns `(z, U)`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, y: Var) -> Result<(Var, Var)> {
        let y_m = self.multiscale(g, y)?;
        let u = self.maps(g, y_m)?;
        Ok((self.apply(g, y, u)?, u))
    }

    /// `y_m: [T, C/r]` for `y: [T, C, H, W]`.
    pub fn temporal_multiscale<S: Scalar>(&self, store: &ParamStore<S>, y: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new(store);
        let yv = g.input(y.clone());
        let out = self.multiscale(&mut g, yv)?;
        let t = y.shape()[0];
        g.value(out).clone().reshape([t, self.config.reduced_channels()])
    }

    /// `U: [T, C]` for `y_m: [T, C/r]`.
    pub fn temporal_attention_maps<S: Scalar>(&self, store: &ParamStore<S>, y_m: &Tensor<S>) -> Result<Tensor<S>> {
        let (t, cr) = match y_m.shape() {
            &[t, cr] => (t, cr),
            s => return Err(shape_err("temporal_attention_maps", format!("expected [T, C/r], got {s:?}"))),
        };
        let mut g = Graph::new(store);
        let yv = g.input(y_m.clone().reshape([t, cr, 1, 1])?);
        let u = self.maps(&mut g, yv)?;
        g.value(u).clone().reshape([t, self.config.channels])
    }
}

/// `z = y + lambda * (y * U)` on plain tensors, `U: [T, C]` broadcast over space.
pub fn apply_temporal_attention<S: Scalar>(y: &Tensor<S>, u: &Tensor<S>, lambda: S) -> Result<Tensor<S>> {
    let yu = ops::mul_spatial(y, u)?;
    y.zip_map(&yu, |a, b| a + lambda * b)
}
