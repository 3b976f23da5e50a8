//! Identification module: multi-scale dilated spatio-temporal attention maps.
//!
//! Input features are reduced to `C/r` channels, passed through `N_s * N_t`
//! parallel grouped `3x3x3` convolutions with dilation `(j, i, i)`, mixed
//! with learned coefficients, projected back to `C` channels and gated into
//! `M` in `(-0.5, 0.5)`. The stage output is `y = x + alpha * (E * M)`.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::conv::ConvSpec;
use crate::error::{shape_err, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Shape hyper-parameters of an identification module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdentificationConfig {
    pub channels: usize,
    /// Channel reduction factor `r`.
    pub reduction: usize,
    /// Number of spatial dilation rates `N_s`.
    pub spatial_scales: usize,
    /// Number of temporal dilation rates `N_t`.
    pub temporal_scales: usize,
    /// Base kernel `K_t x K_s x K_s`.
    pub kernel_t: usize,
    pub kernel_s: usize,
    /// Groups of each branch convolution; `None` means depthwise (`C/r`).
    pub branch_groups: Option<usize>,
}

impl IdentificationConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            reduction: 16,
            spatial_scales: 3,
            temporal_scales: 4,
            kernel_t: 3,
            kernel_s: 3,
            branch_groups: None,
        }
    }

    pub fn reduced_channels(&self) -> usize {
        (self.channels / self.reduction).max(1)
    }

    pub fn groups(&self) -> usize {
        self.branch_groups.unwrap_or_else(|| self.reduced_channels())
    }

    /// Branch `(i, j)` with spatial dilation `i` and temporal dilation `j`, both 1-based.
    pub fn branch_spec(&self, i: usize, j: usize) -> ConvSpec {
        ConvSpec::spatiotemporal(self.kernel_t, self.kernel_s, j, i, self.groups())
    }

    /// `(i, j)` pairs in coefficient order (spatial-major).
    pub fn branches(&self) -> impl Iterator<Item = (usize, usize)> {
        let nt = self.temporal_scales;
        (1..=self.spatial_scales).flat_map(move |i| (1..=nt).map(move |j| (i, j)))
    }
}

#[derive(Clone, Debug)]
pub struct IdentificationParams {
    pub config: IdentificationConfig,
    /// `[C/r, C, 1, 1, 1]`, no bias.
    pub reduce: ParamId,
    /// One kernel per branch, in [`IdentificationConfig::branches`] order.
    pub branch_kernels: Vec<ParamId>,
    /// Branch coefficients `sigma`, initialised to `1 / (N_s N_t)`.
    pub sigma: ParamId,
    /// `[C, C/r, 1, 1, 1]`.
    pub recover: ParamId,
    /// Zero-initialised.
    pub recover_bias: ParamId,
    /// Residual gain, initialised to zero.
    pub alpha: ParamId,
}

impl IdentificationParams {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        prefix: &str,
        config: IdentificationConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (c, cr, groups) = (config.channels, config.reduced_channels(), config.groups());
        if cr % groups != 0 || groups == 0 {
            return Err(shape_err("identification", format!("{groups} groups do not divide {cr} reduced channels")));
        }
        let reduce =
            store.add(format!("{prefix}.reduce"), Tensor::randn([cr, c, 1, 1, 1], (1.0 / c as f64).sqrt(), rng));
        let fan_in = (cr / groups) * config.kernel_t * config.kernel_s * config.kernel_s;
        let branch_kernels = config
            .branches()
            .map(|(i, j)| {
                store.add(
                    format!("{prefix}.branch_s{i}_t{j}"),
                    Tensor::randn(
                        [cr, cr / groups, config.kernel_t, config.kernel_s, config.kernel_s],
                        (1.0 / fan_in as f64).sqrt(),
                        rng,
                    ),
                )
            })
            .collect();
        let n = config.spatial_scales * config.temporal_scales;
        Ok(Self {
            config,
            reduce,
            branch_kernels,
            sigma: store.add(format!("{prefix}.sigma"), Tensor::full([n], S::one() / S::of(n as f64))),
            recover: store
                .add(format!("{prefix}.recover"), Tensor::randn([c, cr, 1, 1, 1], (1.0 / cr as f64).sqrt(), rng)),
            recover_bias: store.add(format!("{prefix}.recover_bias"), Tensor::zeros([c])),
            alpha: store.add(format!("{prefix}.alpha"), Tensor::zeros([1])),
        })
    }

    /// Channel reduction `x -> x_r`.
    pub fn reduce<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let w = g.param(self.reduce);
        g.conv(x, w, None, ConvSpec::pointwise())
    }

    /// `x_m = sum_ij sigma_ij conv_ij(x_r)`.
    pub fn branches<S: Scalar>(&self, g: &mut Graph<'_, S>, x_r: Var) -> Result<Var> {
        let sigma = g.param(self.sigma);
        let mut acc: Option<Var> = None;
        for (k, (i, j)) in self.config.branches().enumerate() {
            let w = g.param(self.branch_kernels[k]);
            let y = g.conv(x_r, w, None, self.config.branch_spec(i, j))?;
            let y = g.scale_by(y, sigma, k)?;
            acc = Some(match acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        acc.ok_or_else(|| shape_err("identification", "no branches configured"))
    }

    /// `M = sigmoid(conv_1x1x1(x_m)) - 0.5`.
    pub fn maps<S: Scalar>(&self, g: &mut Graph<'_, S>, x_m: Var) -> Result<Var> {
        let w = g.param(self.recover);
        let b = g.param(self.recover_bias);
        let xb = g.conv(x_m, w, Some(b), ConvSpec::pointwise())?;
        Ok(g.gate(xb))
    }

    /// `y = x + alpha * (E * M)` with `E: [T, C, 1, 1]` broadcast over space.
    pub fn fuse<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var, e: Var, m: Var) -> Result<Var> {
        let em = g.mul_spatial(m, e)?;
        let alpha = g.param(self.alpha);
        let scaled = g.scale_by(em, alpha, 0)?;
        g.add(x, scaled)
    }

    /// Reduction, branches and gating for `x: [T, C, H, W]`; returns `M`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let dims = ops::dims4("identification", g.value(x))?;
        if dims[1] != self.config.channels {
            return Err(shape_err(
                "identification",
                format!("module has {} channels, input has {}", self.config.channels, dims[1]),
            ));
        }
        let x_r = self.reduce(g, x)?;
        let x_m = self.branches(g, x_r)?;
        self.maps(g, x_m)
    }

    /// Multi-scale branch mixture for reduced features `x_r: [T, C/r, H, W]`.
    pub fn multiscale_branches<S: Scalar>(&self, store: &ParamStore<S>, x_r: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new(store);
        let xv = g.input(x_r.clone());
        let out = self.branches(&mut g, xv)?;
        Ok(g.value(out).clone())
    }

    /// Gated identification maps `M: [T, C, H, W]` from `x_m`.
    pub fn identification_maps<S: Scalar>(&self, store: &ParamStore<S>, x_m: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new(store);
        let xv = g.input(x_m.clone());
        let out = self.maps(&mut g, xv)?;
        Ok(g.value(out).clone())
    }
}

/// `y = x + alpha * (E * M)` on plain tensors.
pub fn fuse_trajectories<S: Scalar>(x: &Tensor<S>, e: &Tensor<S>, m: &Tensor<S>, alpha: S) -> Result<Tensor<S>> {
    x.expect_same_shape("fuse_trajectories", m)?;
    let em = ops::mul_spatial(m, e)?;
    x.zip_map(&em, |a, b| a + alpha * b)
}
