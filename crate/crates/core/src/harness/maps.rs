//! Heatmap export of correlation, identification and temporal attention maps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::model::CorrNet;
use crate::tensor::Tensor;

/// Maps `(-0.5, 0.5)` linearly onto `0..=255`.
pub fn to_gray(v: f32) -> u8 {
    ((v as f64 + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Binary (`P5`) greyscale image of a `[H, W]` plane.
pub fn pgm(plane: &[f32], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| to_gray(v)));
    out
}

/// Argmax `(row, col)` of a plane, first occurrence on ties.
pub fn peak(plane: &[f32], w: usize) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in plane.iter().enumerate() {
        if v > plane[best] {
            best = i;
        }
    }
    (best / w, best % w)
}

/// Maps of one correlation stage for one video, as plain tensors.
#[derive(Clone, Debug)]
pub struct StageDump {
    /// 1-based extractor stage the maps follow.
    pub stage: usize,
    pub offsets: Vec<isize>,
    /// `[T, L, H, W]`.
    pub a_hat: Tensor<f32>,
    /// Channel mean of `M`, `[T, H, W]`.
    pub m_mean: Tensor<f32>,
    /// Mean `|U|` over channels per frame.
    pub u_magnitude: Vec<f32>,
}

impl StageDump {
    /// Peak coordinates of `A_hat` per frame and neighbour slot.
    pub fn peaks(&self) -> Vec<Vec<(usize, usize)>> {
        let &[t, l, h, w] = self.a_hat.shape() else { unreachable!() };
        (0..t)
            .map(|ti| {
                (0..l)
                    .map(|li| {
                        let off = (ti * l + li) * h * w;
                        peak(&self.a_hat.data()[off..off + h * w], w)
                    })
                    .collect()
            })
            .collect()
    }
}

/// Runs the model on `video` and collects every stage's maps.
pub fn collect_maps(model: &CorrNet, store: &ParamStore<f32>, video: &Tensor<f32>) -> Result<Vec<StageDump>> {
    let mut g = Graph::new(store);
    let x = g.input(video.clone());
    let (_, maps) = model.extract(&mut g, x)?;
    let mut out = Vec::new();
    for (j, m) in maps.iter().enumerate() {
        let a_hat = g.value(m.a_hat).clone();
        let mv = g.value(m.m);
        let &[t, c, h, w] = mv.shape() else { unreachable!() };
        let mut mean = vec![0f32; t * h * w];
        for ti in 0..t {
            for ci in 0..c {
                let off = (ti * c + ci) * h * w;
                for (acc, &v) in mean[ti * h * w..(ti + 1) * h * w].iter_mut().zip(&mv.data()[off..off + h * w]) {
                    *acc += v;
                }
            }
        }
        mean.iter_mut().for_each(|v| *v /= c as f32);
        let u = g.value(m.u);
        let u_magnitude =
            u.data().chunks_exact(c).map(|row| row.iter().map(|v| v.abs()).sum::<f32>() / c as f32).collect();
        out.push(StageDump {
            stage: model.config.st_stage_index(j) + 1,
            offsets: crate::ops::window_offsets(model.config.windows[j])?,
            a_hat,
            m_mean: Tensor::new([t, h, w], mean)?,
            u_magnitude,
        });
    }
    Ok(out)
}

/// Writes, per stage `k`: `stage{k}_ahat_t{t}_l{l}.pgm`, `stage{k}_m_t{t}.pgm`,
/// `stage{k}_u.txt` (one value per frame) and `stage{k}_peaks.txt`.
pub fn write_maps(dumps: &[StageDump], out: &Path) -> Result<Vec<PathBuf>> {
    if dumps.is_empty() {
        return Err(Error::InvalidArgument("model has no correlation stages to dump".into()));
    }
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    for d in dumps {
        let k = d.stage;
        let &[t, l, h, w] = d.a_hat.shape() else { unreachable!() };
        for ti in 0..t {
            for li in 0..l {
                let off = (ti * l + li) * h * w;
                put(format!("stage{k}_ahat_t{ti:03}_l{li}.pgm"), pgm(&d.a_hat.data()[off..off + h * w], h, w))?;
            }
            put(format!("stage{k}_m_t{ti:03}.pgm"), pgm(&d.m_mean.data()[ti * h * w..(ti + 1) * h * w], h, w))?;
        }
        let mut u = String::new();
        for v in &d.u_magnitude {
            let _ = writeln!(u, "{v:.6}");
        }
        put(format!("stage{k}_u.txt"), u.into_bytes())?;
        let mut peaks = String::from("# frame slot offset row col\n");
        for (ti, row) in d.peaks().iter().enumerate() {
            for (li, &(r, c)) in row.iter().enumerate() {
                let _ = writeln!(peaks, "{ti} {li} {} {r} {c}", d.offsets[li]);
            }
        }
        put(format!("stage{k}_peaks.txt"), peaks.into_bytes())?;
    }
    Ok(written)
}
