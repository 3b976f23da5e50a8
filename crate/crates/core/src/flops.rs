//! Closed-form multiply-add counts. One multiply-add counts as one FLOP.

use std::fmt::Write as _;

use crate::error::Result;
use crate::model::ModelConfig;

/// One counted operation: `count` is the exact value of `formula` under `bindings`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopComponent {
    pub name: String,
    pub formula: String,
    pub bindings: String,
    /// Temporal head layers run at `T/2` and `T/4`, which may be fractional.
    pub count: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlopReport {
    pub components: Vec<FlopComponent>,
}

impl FlopReport {
    fn push(&mut self, name: impl Into<String>, formula: &str, bindings: String, count: f64) {
        self.components.push(FlopComponent { name: name.into(), formula: formula.to_string(), bindings, count });
    }

    fn extend_prefixed(&mut self, prefix: &str, other: FlopReport) {
        for mut c in other.components {
            c.name = format!("{prefix}.{}", c.name);
            self.components.push(c);
        }
    }

    pub fn total(&self) -> f64 {
        self.components.iter().map(|c| c.count).sum()
    }

    pub fn gflops(&self) -> f64 {
        self.total() / 1e9
    }

    /// Sum of components whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> f64 {
        self.components.iter().filter(|c| c.name.starts_with(prefix)).map(|c| c.count).sum()
    }

    /// Aligned human-readable table.
    pub fn to_text(&self) -> String {
        let nw = self.components.iter().map(|c| c.name.len()).max().unwrap_or(0).max(9);
        let fw = self.components.iter().map(|c| c.formula.len()).max().unwrap_or(0).max(7);
        let mut s = String::new();
        let _ = writeln!(s, "{:<nw$}  {:>18}  {:<fw$}  bindings", "component", "multiply-adds", "formula");
        for c in &self.components {
            let _ = writeln!(s, "{:<nw$}  {:>18}  {:<fw$}  {}", c.name, fmt_count(c.count), c.formula, c.bindings);
        }
        let _ = writeln!(s, "{:<nw$}  {:>18}  ({:.6} GFLOPs)", "total", fmt_count(self.total()), self.gflops());
        s
    }

    /// `key=value` lines: `<name>.flops`, `<name>.formula`, then `total.flops` and `total.gflops`.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for c in &self.components {
            let _ = writeln!(s, "{}.flops={}", c.name, fmt_count(c.count));
            let _ = writeln!(s, "{}.formula={}", c.name, c.formula);
            let _ = writeln!(s, "{}.bindings={}", c.name, c.bindings);
        }
        let _ = writeln!(s, "total.flops={}", fmt_count(self.total()));
        let _ = writeln!(s, "total.gflops={:.9}", self.gflops());
        s
    }
}

fn fmt_count(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v}")
    }
}

/// Full pairwise affinity volumes between each frame and `neighbors` others.
pub fn count_pairwise_correlation(t: usize, c: usize, h: usize, w: usize, neighbors: usize) -> FlopReport {
    let mut r = FlopReport::default();
    let (tf, cf, hf, wf, nf) = (t as f64, c as f64, h as f64, w as f64, neighbors as f64);
    r.push(
        "pairwise_affinity",
        "neighbors*T*C*H^2*W^2",
        format!("neighbors={neighbors} T={t} C={c} H={h} W={w}"),
        nf * tf * cf * hf * hf * wf * wf,
    );
    r
}

/// Compressed correlation: descriptor aggregation, correlation with `L`
/// neighbours and trajectory re-weighting.
pub fn count_compressed_correlation(t: usize, c: usize, h: usize, w: usize, l: usize) -> FlopReport {
    let mut r = FlopReport::default();
    let (tf, cf, hf, wf, lf) = (t as f64, c as f64, h as f64, w as f64, l as f64);
    let b = format!("T={t} C={c} H={h} W={w}");
    let bl = format!("T={t} L={l} C={c} H={h} W={w}");
    r.push("aggregation.pooling", "T*2*C*H*W", b.clone(), tf * 2.0 * cf * hf * wf);
    r.push("aggregation.attention", "T*(3*C*H*W + 2*C^2)", b, tf * (3.0 * cf * hf * wf + 2.0 * cf * cf));
    r.push("correlation_maps", "T*L*C*H*W", bl.clone(), tf * lf * cf * hf * wf);
    r.push("trajectory_features", "T*L*C*H*W", bl, tf * lf * cf * hf * wf);
    r
}

#[allow(clippy::too_many_arguments)]
fn conv(
    r: &mut FlopReport,
    name: String,
    t_rate: (f64, &str),
    c_out: usize,
    spatial_out: usize,
    k_vol: usize,
    c_in: usize,
    groups: usize,
) {
    let (tf, ts) = t_rate;
    let per = (c_out * spatial_out) as f64 * (k_vol * c_in / groups) as f64;
    r.push(
        name,
        "T_out*C_out*H_out*W_out*(K_vol*C_in/groups)",
        format!("T_out={ts} C_out={c_out} H_out*W_out={spatial_out} K_vol={k_vol} C_in={c_in} groups={groups}"),
        tf * per,
    );
}

/// Multiply-adds of the configured network for `frames` input frames.
pub fn count_model(config: &ModelConfig, frames: usize) -> Result<FlopReport> {
    config.validate()?;
    let t = frames as f64;
    let mut r = FlopReport::default();
    let mut c_in = config.in_channels;
    for (k, &c_out) in config.stage_channels.iter().enumerate() {
        let s = config.stage_size(k);
        conv(&mut r, format!("stage{}.conv", k + 1), (t, "T"), c_out, s * s, 9, c_in, 1);
        c_in = c_out;
        let Some(j) = k.checked_sub(1).filter(|&j| config.st_modules && j < config.windows.len()) else {
            continue;
        };
        let p = format!("st{}", k + 1);
        let c = c_out;
        let hw = s * s;
        let l = crate::ops::window_offsets(config.windows[j])?.len();
        r.extend_prefixed(&format!("{p}.correlation"), count_compressed_correlation(frames, c, s, s, l));
        let cr = (c / config.reduction).max(1);
        conv(&mut r, format!("{p}.identification.reduce"), (t, "T"), cr, hw, 1, c, 1);
        let branches = config.spatial_scales * config.temporal_scales;
        for b in 0..branches {
            conv(&mut r, format!("{p}.identification.branch{b}"), (t, "T"), cr, hw, 27, cr, cr);
        }
        conv(&mut r, format!("{p}.identification.recover"), (t, "T"), c, hw, 1, cr, 1);
        conv(&mut r, format!("{p}.temporal.reduce"), (t, "T"), cr, 1, 1, c, 1);
        for b in 0..config.temporal_branches {
            conv(&mut r, format!("{p}.temporal.branch{b}"), (t, "T"), cr, 1, 3, cr, cr);
        }
        conv(&mut r, format!("{p}.temporal.recover"), (t, "T"), c, 1, 1, cr, 1);
    }
    let d = config.feature_dim();
    let hc = config.head_channels;
    conv(&mut r, "head.conv1".into(), (t, "T"), hc, 1, 5, d, 1);
    conv(&mut r, "head.conv2".into(), (t / 2.0, "T/2"), hc, 1, 5, hc, 1);
    let t4 = t / 4.0;
    let h = config.hidden;
    let mut input = hc;
    for layer in 0..config.lstm_layers {
        r.push(
            format!("head.lstm{layer}"),
            "2*T_out*(In*4*H + H*4*H)",
            format!("T_out=T/4 In={input} H={h}"),
            2.0 * t4 * ((input * 4 * h) + (h * 4 * h)) as f64,
        );
        input = 2 * h;
    }
    r.push(
        "head.classifier",
        "T_out*2*H*(V+1)",
        format!("T_out=T/4 H={h} V+1={}", config.classes()),
        t4 * (2 * h * config.classes()) as f64,
    );
    Ok(r)
}

/// `(C, H, W)` of the three stages hosting correlation in an 18-layer
/// residual backbone at 224x224 input.
pub const REFERENCE_STAGE_SHAPES: [(usize, usize, usize); 3] = [(128, 28, 28), (256, 14, 14), (512, 7, 7)];

/// Neighbours of the full pairwise affinity (previous and next frame).
pub const PAIRWISE_NEIGHBORS: usize = 2;

/// Pairwise versus compressed cost at one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageComparison {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub pairwise: f64,
    pub compressed: f64,
}

impl StageComparison {
    pub fn ratio(&self) -> f64 {
        self.pairwise / self.compressed
    }
}

/// Compares both correlation costs for each `(C, H, W)` with its window `L`.
pub fn compare_stages(shapes: &[(usize, usize, usize)], windows: &[usize], frames: usize) -> Vec<StageComparison> {
    shapes
        .iter()
        .zip(windows)
        .map(|(&(c, h, w), &l)| StageComparison {
            channels: c,
            height: h,
            width: w,
            window: l,
            pairwise: count_pairwise_correlation(frames, c, h, w, PAIRWISE_NEIGHBORS).total(),
            compressed: count_compressed_correlation(frames, c, h, w, l).total(),
        })
        .collect()
}

/// Least-squares fit `y = a + b x`; returns `(a, b, r_squared)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    (a, b, sxy * sxy / (sxx * syy))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_formula() {
        assert_eq!(count_pairwise_correlation(1, 1, 2, 2, 1).total(), 16.0);
        let a = count_pairwise_correlation(3, 5, 7, 9, 2).total();
        let b = count_pairwise_correlation(3, 5, 14, 9, 2).total();
        assert_eq!(b / a, 4.0);
    }

    #[test]
    fn compressed_without_neighbours_is_aggregation_only() {
        let r = count_compressed_correlation(2, 4, 3, 3, 0);
        assert_eq!(r.total(), r.subtotal("aggregation"));
        assert_eq!(r.total(), 2.0 * (5.0 * 4.0 * 9.0 + 2.0 * 16.0));
    }

    #[test]
    fn pointwise_conv_count() {
        let mut r = FlopReport::default();
        conv(&mut r, "c".into(), (1.0, "1"), 4, 4, 1, 4, 1);
        assert_eq!(r.total(), 64.0);
    }

    #[test]
    fn exact_line_fits_perfectly() {
        let (a, b, r2) = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]);
        assert!((a - 1.0).abs() < 1e-12 && (b - 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn model_is_linear_in_frames() {
        let cfg = ModelConfig::default();
        let one = count_model(&cfg, 1).unwrap();
        let two = count_model(&cfg, 2).unwrap();
        assert_eq!(two.total(), 2.0 * one.total());
        assert_eq!(one.total(), one.components.iter().map(|c| c.count).sum::<f64>());
        let text = one.to_key_values();
        assert!(text.contains("stage1.conv.flops=") && text.contains("total.gflops="));
    }
}
