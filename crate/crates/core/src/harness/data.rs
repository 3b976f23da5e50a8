//! Synthetic trajectory-sign corpus.
//!
//! Each gloss is a motion primitive of a bright square on a dark field.
//! Pixel colour encodes absolute position (red 1, green grows with x, blue
//! with y), so a single frame reveals where the square is but not where it
//! is going. Left and right sweeps (and up and down sweeps) pass through
//! the same centre frame.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Checkpoint, GlossSequence, Vocabulary};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    LeftSweep,
    RightSweep,
    UpSweep,
    DownSweep,
    Diagonal,
    Circle,
    Grow,
    Shrink,
}

impl Primitive {
    pub const ALL: [Primitive; 8] = [
        Primitive::LeftSweep,
        Primitive::RightSweep,
        Primitive::UpSweep,
        Primitive::DownSweep,
        Primitive::Diagonal,
        Primitive::Circle,
        Primitive::Grow,
        Primitive::Shrink,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::LeftSweep => "left-sweep",
            Primitive::RightSweep => "right-sweep",
            Primitive::UpSweep => "up-sweep",
            Primitive::DownSweep => "down-sweep",
            Primitive::Diagonal => "diagonal",
            Primitive::Circle => "circle",
            Primitive::Grow => "grow",
            Primitive::Shrink => "shrink",
        }
    }

    /// Class index (blank is 0).
    pub fn token(self) -> usize {
        Self::ALL.iter().position(|&p| p == self).unwrap() + 1
    }

    pub fn from_token(token: usize) -> Option<Self> {
        token.checked_sub(1).and_then(|i| Self::ALL.get(i)).copied()
    }

    /// Square centre (in units of the frame size) and side length (in
    /// units of the base side) at phase `u` in `[0, 1]`.
    fn pose(self, u: f64) -> (f64, f64, f64) {
        let (lo, hi) = (0.25, 0.75);
        let lerp = |a: f64, b: f64| a + (b - a) * u;
        match self {
            Primitive::LeftSweep => (lerp(hi, lo), 0.5, 1.0),
            Primitive::RightSweep => (lerp(lo, hi), 0.5, 1.0),
            Primitive::UpSweep => (0.5, lerp(hi, lo), 1.0),
            Primitive::DownSweep => (0.5, lerp(lo, hi), 1.0),
            Primitive::Diagonal => (lerp(lo, hi), lerp(lo, hi), 1.0),
            Primitive::Circle => {
                let a = 2.0 * PI * u;
                (0.5 + 0.22 * a.cos(), 0.5 + 0.22 * a.sin(), 1.0)
            }
            Primitive::Grow => (0.5, 0.5, lerp(0.5, 1.8)),
            Primitive::Shrink => (0.5, 0.5, lerp(1.8, 0.5)),
        }
    }
}

/// Corpus generation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpusSpec {
    pub frame_size: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
    /// Side of the square, pixels.
    pub square: usize,
    /// Maximum per-gloss offset, pixels.
    pub jitter: i64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            frame_size: 64,
            frames_min: 6,
            frames_max: 10,
            tokens_min: 2,
            tokens_max: 5,
            train: 400,
            dev: 50,
            test: 50,
            seed: 42,
            square: 12,
            jitter: 3,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.frames_min < 2 || self.frames_min > self.frames_max {
            return bad("frames per gloss must satisfy 2 <= frames_min <= frames_max");
        }
        if self.tokens_min == 0 || self.tokens_min > self.tokens_max {
            return bad("tokens per sample must satisfy 1 <= tokens_min <= tokens_max");
        }
        if self.frame_size < 16 || self.square == 0 || self.square * 2 > self.frame_size {
            return bad("frame_size must be at least 16 and at least twice the square side");
        }
        if self.jitter < 0 {
            return bad("jitter must be nonnegative");
        }
        Ok(())
    }

    pub fn vocabulary() -> Vocabulary {
        Vocabulary::new(Primitive::ALL.iter().map(|p| p.name().to_string()).collect()).expect("fixed names")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split {s:?}, expected train, dev or test")))
    }

    fn index(self) -> u64 {
        self as u64
    }
}

/// `[T, 3, S, S]` frames quantised to `u8` (value `k` means `k / 255`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Video {
    pub frames: usize,
    pub size: usize,
    pub data: Vec<u8>,
}

impl Video {
    pub fn frame(&self, t: usize) -> &[u8] {
        let n = 3 * self.size * self.size;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let data = self.data.iter().map(|&v| S::of(v as f64 / 255.0)).collect();
        Tensor::new([self.frames, 3, self.size, self.size], data).expect("consistent video")
    }

    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Self> {
        let &[frames, 3, h, w] = t.shape() else {
            return Err(Error::Format(format!("video record must be [T, 3, S, S], got {:?}", t.shape())));
        };
        if h != w {
            return Err(Error::Format(format!("video frames must be square, got {h}x{w}")));
        }
        let data = t
            .data()
            .iter()
            .map(|v| {
                let k = (v.to_f64().unwrap_or(f64::NAN) * 255.0).round();
                if (0.0..=255.0).contains(&k) {
                    Ok(k as u8)
                } else {
                    Err(Error::Format("video value outside [0, 1]".into()))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { frames, size: h, data })
    }
}

/// Where one gloss sits in a sample, with its per-frame square poses.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub primitive: Primitive,
    pub start: usize,
    pub frames: usize,
    /// `(cx, cy, side)` in pixels for each frame of the segment.
    pub poses: Vec<(f64, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub video: Video,
    pub labels: GlossSequence,
    pub trace: Vec<Segment>,
}

impl Sample {
    /// Label sequence reconstructed from the generation trace.
    pub fn trace_labels(&self) -> Vec<usize> {
        self.trace.iter().map(|s| s.primitive.token()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocabulary: Vocabulary,
    pub train: Vec<Sample>,
    pub dev: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sample `index` in `split`: `splitmix64(splitmix64(seed ^ split) + index)`.
pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    splitmix64(splitmix64(seed ^ split.index()).wrapping_add(index as u64))
}

/// Paints one frame with the square at `(cx, cy)` of side `side`.
pub fn render_frame(size: usize, cx: f64, cy: f64, side: f64, out: &mut [u8]) {
    let plane = size * size;
    out.fill(0);
    let half = side / 2.0;
    let x0 = (cx - half).round().max(0.0) as usize;
    let x1 = ((cx + half).round().max(0.0) as usize).min(size);
    let y0 = (cy - half).round().max(0.0) as usize;
    let y1 = ((cy + half).round().max(0.0) as usize).min(size);
    let scale = 255.0 / (size - 1) as f64;
    for y in y0..y1 {
        for x in x0..x1 {
            let p = y * size + x;
            out[p] = 255;
            out[plane + p] = (x as f64 * scale).round() as u8;
            out[2 * plane + p] = (y as f64 * scale).round() as u8;
        }
    }
}

/// Square poses of `frames` frames of `prim`, offset by `(dx, dy)` pixels.
pub fn primitive_poses(
    prim: Primitive,
    frames: usize,
    size: usize,
    square: usize,
    offset: (i64, i64),
) -> Vec<(f64, f64, f64)> {
    let s = size as f64;
    (0..frames)
        .map(|k| {
            let u = if frames > 1 { k as f64 / (frames - 1) as f64 } else { 0.5 };
            let (px, py, scale) = prim.pose(u);
            (px * s + offset.0 as f64, py * s + offset.1 as f64, scale * square as f64)
        })
        .collect()
}

/// Generates one sample; a pure function of `(spec, seed)`.
pub fn generate_sample(spec: &SyntheticCorpusSpec, id: String, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(spec.tokens_min..=spec.tokens_max);
    let mut prims: Vec<Primitive> = Vec::with_capacity(n);
    while prims.len() < n {
        let p = Primitive::ALL[rng.random_range(0..Primitive::ALL.len())];
        if prims.last() != Some(&p) {
            prims.push(p);
        }
    }
    let mut trace = Vec::with_capacity(n);
    let mut start = 0;
    for prim in prims {
        let frames = rng.random_range(spec.frames_min..=spec.frames_max);
        let j = spec.jitter;
        let offset = (rng.random_range(-j..=j), rng.random_range(-j..=j));
        let poses = primitive_poses(prim, frames, spec.frame_size, spec.square, offset);
        trace.push(Segment { primitive: prim, start, frames, poses });
        start += frames;
    }
    let per_frame = 3 * spec.frame_size * spec.frame_size;
    let mut data = vec![0u8; start * per_frame];
    let mut t = 0;
    for seg in &trace {
        for &(cx, cy, side) in &seg.poses {
            render_frame(spec.frame_size, cx, cy, side, &mut data[t * per_frame..(t + 1) * per_frame]);
            t += 1;
        }
    }
    let labels = GlossSequence::new(trace.iter().map(|s| s.primitive.token()).collect()).expect("no blank");
    Sample { id, video: Video { frames: start, size: spec.frame_size, data }, labels, trace }
}

pub fn generate_split(spec: &SyntheticCorpusSpec, split: Split) -> Vec<Sample> {
    let count = match split {
        Split::Train => spec.train,
        Split::Dev => spec.dev,
        Split::Test => spec.test,
    };
    (0..count)
        .map(|i| generate_sample(spec, format!("{}{i:05}", split.name()), sample_seed(spec.seed, split, i)))
        .collect()
}

pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    Ok(Corpus {
        vocabulary: SyntheticCorpusSpec::vocabulary(),
        train: generate_split(spec, Split::Train),
        dev: generate_split(spec, Split::Dev),
        test: generate_split(spec, Split::Test),
    })
}

/// Writes `vocab.txt` and, per split, `<id>.frames` plus `labels.txt`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("vocab.txt"), corpus.vocabulary.glosses().join("\n") + "\n")?;
    for split in Split::ALL {
        let sdir = dir.join(split.name());
        fs::create_dir_all(&sdir)?;
        let mut labels = String::new();
        for s in corpus.split(split) {
            let mut ck = Checkpoint::new();
            ck.insert("frames", s.video.to_tensor::<f32>());
            ck.save(&sdir.join(format!("{}.frames", s.id)))?;
            let _ = writeln!(labels, "{} {}", s.id, corpus.vocabulary.render(&s.labels));
        }
        fs::write(sdir.join("labels.txt"), labels)?;
    }
    Ok(())
}

pub fn read_vocabulary(dir: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(dir.join("vocab.txt"))?;
    Vocabulary::new(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

/// Loads one split from disk. Samples read back have an empty trace.
pub fn read_split(dir: &Path, split: Split, vocabulary: &Vocabulary) -> Result<Vec<Sample>> {
    let sdir = dir.join(split.name());
    let text = fs::read_to_string(sdir.join("labels.txt"))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, glosses) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        if id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(Error::Format(format!("labels.txt line {}: bad sample id {id:?}", n + 1)));
        }
        let labels =
            vocabulary.encode(glosses).map_err(|e| Error::Format(format!("labels.txt line {}: {e}", n + 1)))?;
        let ck = Checkpoint::load(&sdir.join(format!("{id}.frames")))?;
        out.push(Sample {
            id: id.to_string(),
            video: Video::from_tensor(ck.require("frames")?)?,
            labels,
            trace: Vec::new(),
        });
    }
    Ok(out)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let vocabulary = read_vocabulary(dir)?;
    Ok(Corpus {
        train: read_split(dir, Split::Train, &vocabulary)?,
        dev: read_split(dir, Split::Dev, &vocabulary)?,
        test: read_split(dir, Split::Test, &vocabulary)?,
        vocabulary,
    })
}
