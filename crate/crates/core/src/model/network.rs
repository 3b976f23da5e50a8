//! Staged 2D extractor with spatial-temporal correlation stages, followed by
//! a 1D temporal CNN, a bidirectional LSTM and a gloss classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::conv::ConvSpec;
use crate::correlation::CorrelationParams;
use crate::error::{shape_err, Error, Result};
use crate::identification::{IdentificationConfig, IdentificationParams};
use crate::model::decode::BLANK;
use crate::ops::{self, PoolMode};
use crate::temporal_attention::{TemporalAttentionConfig, TemporalAttentionParams};
use crate::tensor::{Scalar, Tensor};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output width of each stride-2 stage.
    pub stage_channels: Vec<usize>,
    /// Expected `H0 = W0` of input frames.
    pub frame_size: usize,
    /// Correlation window of the stage attached after stage `k + 2` (1-based).
    pub windows: Vec<usize>,
    /// `false` builds the module-free baseline.
    pub st_modules: bool,
    pub reduction: usize,
    pub spatial_scales: usize,
    pub temporal_scales: usize,
    pub temporal_branches: usize,
    /// Number of glosses, excluding blank.
    pub vocab_size: usize,
    /// Width of the 1D temporal convolutions.
    pub head_channels: usize,
    /// Hidden width per direction.
    pub hidden: usize,
    pub lstm_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stage_channels: vec![16, 32, 64, 128],
            frame_size: 64,
            windows: vec![2, 6, 10],
            st_modules: true,
            reduction: 16,
            spatial_scales: 3,
            temporal_scales: 4,
            temporal_branches: 3,
            vocab_size: 8,
            head_channels: 128,
            hidden: 128,
            lstm_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn blank(&self) -> usize {
        BLANK
    }

    pub fn classes(&self) -> usize {
        self.vocab_size + 1
    }

    /// Per-frame feature width `d`.
    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&self.in_channels)
    }

    /// Spatial size after stage `k` (0-based).
    pub fn stage_size(&self, k: usize) -> usize {
        (0..=k).fold(self.frame_size, |s, _| s.div_ceil(2))
    }

    /// Stage index (0-based) after which correlation stage `j` is attached.
    pub fn st_stage_index(&self, j: usize) -> usize {
        j + 1
    }

    /// Logit length for `t` input frames.
    pub fn output_length(t: usize) -> usize {
        t / 2 / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return bad(format!("stage channels {:?} must be nonempty and positive", self.stage_channels));
        }
        if self.windows.len() + 1 > self.stage_channels.len() {
            return bad(format!(
                "{} correlation stages need at least {} extractor stages",
                self.windows.len(),
                self.windows.len() + 1
            ));
        }
        if let Some(w) = self.windows.iter().find(|&&w| w < 2 || w % 2 != 0) {
            return bad(format!("correlation window {w} must be even and at least 2"));
        }
        if self.vocab_size == 0 || self.hidden == 0 || self.head_channels == 0 || self.lstm_layers == 0 {
            return bad("vocabulary, hidden width, head width and layer count must be positive".into());
        }
        if self.in_channels == 0 || self.frame_size == 0 || self.reduction == 0 {
            return bad("input channels, frame size and reduction must be positive".into());
        }
        if self.spatial_scales == 0 || self.temporal_scales == 0 || self.temporal_branches == 0 {
            return bad("branch counts must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// One spatial-temporal correlation stage.
#[derive(Clone, Debug)]
pub struct StStage {
    pub correlation: CorrelationParams,
    pub identification: IdentificationParams,
    pub temporal: TemporalAttentionParams,
}

/// Intermediate maps of one correlation stage.
#[derive(Clone, Copy, Debug)]
pub struct StageMaps {
    /// `[T, L, H, W]`.
    pub a_hat: Var,
    /// `[T, C, H, W]`.
    pub m: Var,
    /// `[T, C, 1, 1]`.
    pub u: Var,
}

impl StStage {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        channels: usize,
        window: usize,
        config: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let correlation = CorrelationParams::new(store, &format!("{prefix}.corr"), channels, window, rng)?;
        let id_cfg = IdentificationConfig {
            reduction: config.reduction,
            spatial_scales: config.spatial_scales,
            temporal_scales: config.temporal_scales,
            ..IdentificationConfig::new(channels)
        };
        let identification = IdentificationParams::new(store, &format!("{prefix}.ident"), id_cfg, rng)?;
        let ta_cfg = TemporalAttentionConfig {
            reduction: config.reduction,
            scales: config.temporal_branches,
            ..TemporalAttentionConfig::new(channels)
        };
        let temporal = TemporalAttentionParams::new(store, &format!("{prefix}.temporal"), ta_cfg, rng)?;
        Ok(Self { correlation, identification, temporal })
    }

    /// `z = TA(x + alpha * E * M)`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<(Var, StageMaps)> {
        let corr = self.correlation.forward(g, x)?;
        let m = self.identification.forward(g, x)?;
        let y = self.identification.fuse(g, x, corr.e, m)?;
        let (z, u) = self.temporal.forward(g, y)?;
        Ok((z, StageMaps { a_hat: corr.a_hat, m, u }))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    /// `[in, 4H]`, gate blocks ordered input, forget, cell, output.
    pub w_ih: ParamId,
    /// `[H, 4H]`.
    pub w_hh: ParamId,
    /// `[4H]`.
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BiLstmLayer {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

#[derive(Clone, Debug)]
pub struct TemporalHead {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub lstm: Vec<BiLstmLayer>,
    /// `[2H, V+1]`.
    pub classifier: ParamId,
    pub classifier_bias: ParamId,
}

/// RNG streams for parameter initialisation. Separate streams let the
/// baseline share backbone and head weights with the full model.
const STREAM_BACKBONE: u64 = 0;
const STREAM_HEAD: u64 = 1;
const STREAM_ST: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Parameter handles of the whole network.
#[derive(Clone, Debug)]
pub struct CorrNet {
    pub config: ModelConfig,
    pub stages: Vec<ConvLayer>,
    pub head: TemporalHead,
    /// One entry per configured window; empty for the baseline.
    pub st_stages: Vec<StStage>,
}

/// Everything recorded by [`CorrNet::forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[T, d]`.
    pub features: Var,
    /// `[T', V+1]`.
    pub logits: Var,
    pub maps: Vec<StageMaps>,
}

impl CorrNet {
    /// Registers and initialises all parameters.
    pub fn init<S: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<S>)> {
        config.validate()?;
        let mut store = ParamStore::new();

        let mut rng = stream(seed, STREAM_BACKBONE);
        let mut c_in = config.in_channels;
        let mut stages = Vec::new();
        for (k, &c_out) in config.stage_channels.iter().enumerate() {
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            stages.push(ConvLayer {
                weight: store
                    .add(format!("stage{}.weight", k + 1), Tensor::randn([c_out, c_in, 1, 3, 3], std, &mut rng)),
                bias: store.add(format!("stage{}.bias", k + 1), Tensor::zeros([c_out])),
            });
            c_in = c_out;
        }

        let mut rng = stream(seed, STREAM_HEAD);
        let d = config.feature_dim();
        let hc = config.head_channels;
        let conv1 = ConvLayer {
            weight: store
                .add("head.conv1.weight", Tensor::randn([hc, d, 5, 1, 1], (2.0 / (d * 5) as f64).sqrt(), &mut rng)),
            bias: store.add("head.conv1.bias", Tensor::zeros([hc])),
        };
        let conv2 = ConvLayer {
            weight: store
                .add("head.conv2.weight", Tensor::randn([hc, hc, 5, 1, 1], (2.0 / (hc * 5) as f64).sqrt(), &mut rng)),
            bias: store.add("head.conv2.bias", Tensor::zeros([hc])),
        };
        let h = config.hidden;
        let bound = 1.0 / (h as f64).sqrt();
        let mut lstm = Vec::new();
        let mut input = hc;
        for layer in 0..config.lstm_layers {
            let mut cell = |dir: &str, rng: &mut ChaCha8Rng| {
                let p = format!("head.lstm{layer}.{dir}");
                // Forget-gate bias starts at 1.
                let mut b = Tensor::zeros([4 * h]);
                b.data_mut()[h..2 * h].fill(S::one());
                LstmCell {
                    w_ih: store.add(format!("{p}.w_ih"), Tensor::uniform([input, 4 * h], -bound, bound, rng)),
                    w_hh: store.add(format!("{p}.w_hh"), Tensor::uniform([h, 4 * h], -bound, bound, rng)),
                    bias: store.add(format!("{p}.bias"), b),
                }
            };
            let forward = cell("fwd", &mut rng);
            let backward = cell("bwd", &mut rng);
            lstm.push(BiLstmLayer { forward, backward });
            input = 2 * h;
        }
        let classifier = store.add(
            "head.classifier.weight",
            Tensor::randn([2 * h, config.classes()], (1.0 / (2 * h) as f64).sqrt(), &mut rng),
        );
        let classifier_bias = store.add("head.classifier.bias", Tensor::zeros([config.classes()]));
        let head = TemporalHead { conv1, conv2, lstm, classifier, classifier_bias };

        let mut st_stages = Vec::new();
        if config.st_modules {
            let mut rng = stream(seed, STREAM_ST);
            for (j, &window) in config.windows.iter().enumerate() {
                let k = config.st_stage_index(j);
                st_stages.push(StStage::new(
                    &mut store,
                    &format!("st{}", k + 1),
                    config.stage_channels[k],
                    window,
                    &config,
                    &mut rng,
                )?);
            }
        }
        Ok((Self { config, stages, head, st_stages }, store))
    }

    /// `video: [T, C_in, H0, W0] -> [T, d]` plus the maps of every correlation stage.
    pub fn extract<S: Scalar>(&self, g: &mut Graph<'_, S>, video: Var) -> Result<(Var, Vec<StageMaps>)> {
        let [t, c, _, _] = ops::dims4("feature extractor", g.value(video))?;
        if t == 0 || c != self.config.in_channels {
            return Err(shape_err(
                "feature extractor",
                format!("expected [T >= 1, {}, H, W], got {:?}", self.config.in_channels, g.shape(video)),
            ));
        }
        let mut x = video;
        let mut maps = Vec::new();
        for (k, layer) in self.stages.iter().enumerate() {
            let w = g.param(layer.weight);
            let b = g.param(layer.bias);
            x = g.conv(x, w, Some(b), ConvSpec::spatial(3, 2, 1))?;
            x = g.relu(x);
            if let Some(st) = k.checked_sub(1).and_then(|j| self.st_stages.get(j)) {
                let (z, m) = st.forward(g, x)?;
                x = z;
                maps.push(m);
            }
        }
        let pooled = g.pool_spatial(x, PoolMode::Avg)?;
        let v = g.reshape(pooled, &[t, self.config.feature_dim()])?;
        if !g.value(v).all_finite() {
            return Err(Error::NonFinite("feature extractor".into()));
        }
        Ok((v, maps))
    }

    fn conv1d<S: Scalar>(g: &mut Graph<'_, S>, x: Var, layer: ConvLayer) -> Result<Var> {
        let [t, c] = [g.shape(x)[0], g.shape(x)[1]];
        let x4 = g.reshape(x, &[t, c, 1, 1])?;
        let w = g.param(layer.weight);
        let b = g.param(layer.bias);
        let y = g.conv(x4, w, Some(b), ConvSpec::temporal(5, 1, 1))?;
        let c_out = g.shape(y)[1];
        let y = g.reshape(y, &[t, c_out])?;
        Ok(g.relu(y))
    }

    fn lstm_direction<S: Scalar>(g: &mut Graph<'_, S>, x: Var, cell: LstmCell, reverse: bool) -> Result<Var> {
        let t = g.shape(x)[0];
        let w_ih = g.param(cell.w_ih);
        let w_hh = g.param(cell.w_hh);
        let bias = g.param(cell.bias);
        let h = g.shape(w_hh)[0];
        let xw = g.matmul(x, w_ih)?;
        let xw = g.add_row_bias(xw, bias)?;
        let mut state: Option<(Var, Var)> = None;
        let mut outs = vec![None; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for ti in order {
            let mut gates = g.slice_rows(xw, ti, 1)?;
            if let Some((h_prev, _)) = state {
                let rec = g.matmul(h_prev, w_hh)?;
                gates = g.add(gates, rec)?;
            }
            let i = g.slice_cols(gates, 0, h)?;
            let i = g.sigmoid(i);
            let f = g.slice_cols(gates, h, h)?;
            let f = g.sigmoid(f);
            let c_in = g.slice_cols(gates, 2 * h, h)?;
            let c_in = g.tanh(c_in);
            let o = g.slice_cols(gates, 3 * h, h)?;
            let o = g.sigmoid(o);
            let mut c = g.mul(i, c_in)?;
            if let Some((_, c_prev)) = state {
                let kept = g.mul(f, c_prev)?;
                c = g.add(kept, c)?;
            }
            let tc = g.tanh(c);
            let h_new = g.mul(o, tc)?;
            outs[ti] = Some(h_new);
            state = Some((h_new, c));
        }
        let outs: Vec<Var> = outs.into_iter().flatten().collect();
        g.concat_rows(&outs)
    }

    /// `v: [T, d] -> logits [floor(floor(T/2)/2), V+1]`.
    pub fn head<S: Scalar>(&self, g: &mut Graph<'_, S>, v: Var) -> Result<Var> {
        let shape = g.shape(v).to_vec();
        if shape.len() != 2 || shape[1] != self.config.feature_dim() {
            return Err(shape_err(
                "temporal head",
                format!("expected [T, {}], got {shape:?}", self.config.feature_dim()),
            ));
        }
        if shape[0] < 4 {
            return Err(Error::InvalidArgument(format!("temporal head needs at least 4 frames, got {}", shape[0])));
        }
        let x = Self::conv1d(g, v, self.head.conv1)?;
        let x = g.max_pool_time(x)?;
        let x = Self::conv1d(g, x, self.head.conv2)?;
        let mut x = g.max_pool_time(x)?;
        for layer in &self.head.lstm {
            let f = Self::lstm_direction(g, x, layer.forward, false)?;
            let b = Self::lstm_direction(g, x, layer.backward, true)?;
            x = g.concat_cols(&[f, b])?;
        }
        let w = g.param(self.head.classifier);
        let b = g.param(self.head.classifier_bias);
        let logits = g.matmul(x, w)?;
        g.add_row_bias(logits, b)
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, video: Var) -> Result<ForwardVars> {
        let (features, maps) = self.extract(g, video)?;
        let logits = self.head(g, features)?;
        Ok(ForwardVars { features, logits, maps })
    }

    /// Per-frame features `[T, d]`.
    pub fn feature_extractor_forward<S: Scalar>(&self, store: &ParamStore<S>, video: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new(store);
        let x = g.input(video.clone());
        let (v, _) = self.extract(&mut g, x)?;
        Ok(g.value(v).clone())
    }

    /// Logits `[T/4, V+1]` from per-frame features.
    pub fn temporal_head_forward<S: Scalar>(&self, store: &ParamStore<S>, v: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new(store);
        let x = g.input(v.clone());
        let out = self.head(&mut g, x)?;
        Ok(g.value(out).clone())
    }

    pub fn logits<S: Scalar>(&self, store: &ParamStore<S>, video: &Tensor<S>) -> Result<Tensor<S>> {
        let mut g = Graph::new(store);
        let x = g.input(video.clone());
        let out = self.forward(&mut g, x)?;
        Ok(g.value(out.logits).clone())
    }
}
