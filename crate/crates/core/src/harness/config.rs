//! Line-based `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors; every key has a default.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::harness::data::SyntheticCorpusSpec;
use crate::model::ModelConfig;

/// Parsed `(line number, key, value)` entries.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if let Some((prev, _, _)) = out.iter().find(|(_, pk, _)| pk == k) {
            return Err(Error::Config(format!("line {}: key {k:?} already set on line {prev}", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("line {line}: invalid value {v:?} for {key}")))
}

fn list(line: usize, key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| value(line, key, p.trim())).collect()
}

fn bool_value(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("line {line}: invalid boolean {v:?} for {key}"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Training run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Corpus directory; relative paths resolve against the config file's directory.
    pub corpus: PathBuf,
    pub model: ModelConfig,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm clip; `0` disables.
    pub clip_norm: f64,
    /// Stop once dev WER falls below this; `0` disables.
    pub stop_dev_wer: f64,
    /// Use only the first `n` training samples; `0` means all.
    pub train_limit: usize,
    /// Use only the first `n` dev samples; `0` means all.
    pub dev_limit: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("data"),
            model: ModelConfig::default(),
            seed: 42,
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            clip_norm: 5.0,
            stop_dev_wer: 0.0,
            train_limit: 0,
            dev_limit: 0,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (line, k, v) in parse_key_values(text)? {
            let m = &mut c.model;
            match k.as_str() {
                "corpus" => c.corpus = PathBuf::from(&v),
                "seed" => c.seed = value(line, &k, &v)?,
                "epochs" => c.epochs = value(line, &k, &v)?,
                "batch_size" => c.batch_size = value(line, &k, &v)?,
                "lr" => c.lr = value(line, &k, &v)?,
                "clip_norm" => c.clip_norm = value(line, &k, &v)?,
                "stop_dev_wer" => c.stop_dev_wer = value(line, &k, &v)?,
                "train_limit" => c.train_limit = value(line, &k, &v)?,
                "dev_limit" => c.dev_limit = value(line, &k, &v)?,
                "stage_channels" => m.stage_channels = list(line, &k, &v)?,
                "frame_size" => m.frame_size = value(line, &k, &v)?,
                "windows" => m.windows = list(line, &k, &v)?,
                "st_modules" => m.st_modules = bool_value(line, &k, &v)?,
                "reduction" => m.reduction = value(line, &k, &v)?,
                "spatial_scales" => m.spatial_scales = value(line, &k, &v)?,
                "temporal_scales" => m.temporal_scales = value(line, &k, &v)?,
                "temporal_branches" => m.temporal_branches = value(line, &k, &v)?,
                "vocab_size" => m.vocab_size = value(line, &k, &v)?,
                "head_channels" => m.head_channels = value(line, &k, &v)?,
                "hidden" => m.hidden = value(line, &k, &v)?,
                "lstm_layers" => m.lstm_layers = value(line, &k, &v)?,
                _ => return Err(Error::Config(format!("line {line}: unknown key {k:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file, resolving a relative `corpus` against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Self::parse(&std::fs::read_to_string(path)?)?;
        if c.corpus.is_relative() {
            if let Some(dir) = path.parent() {
                c.corpus = dir.join(&c.corpus);
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config("lr must be finite and nonnegative".into()));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be finite and nonnegative".into()));
        }
        if !(self.stop_dev_wer.is_finite() && self.stop_dev_wer >= 0.0) {
            return Err(Error::Config("stop_dev_wer must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// Serialises every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("corpus", self.corpus.display().to_string());
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("clip_norm", self.clip_norm.to_string());
        kv("stop_dev_wer", self.stop_dev_wer.to_string());
        kv("train_limit", self.train_limit.to_string());
        kv("dev_limit", self.dev_limit.to_string());
        kv("stage_channels", join(&m.stage_channels));
        kv("frame_size", m.frame_size.to_string());
        kv("windows", join(&m.windows));
        kv("st_modules", m.st_modules.to_string());
        kv("reduction", m.reduction.to_string());
        kv("spatial_scales", m.spatial_scales.to_string());
        kv("temporal_scales", m.temporal_scales.to_string());
        kv("temporal_branches", m.temporal_branches.to_string());
        kv("vocab_size", m.vocab_size.to_string());
        kv("head_channels", m.head_channels.to_string());
        kv("hidden", m.hidden.to_string());
        kv("lstm_layers", m.lstm_layers.to_string());
        s
    }
}

impl SyntheticCorpusSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (line, k, v) in parse_key_values(text)? {
            match k.as_str() {
                "frame_size" => s.frame_size = value(line, &k, &v)?,
                "frames_min" => s.frames_min = value(line, &k, &v)?,
                "frames_max" => s.frames_max = value(line, &k, &v)?,
                "tokens_min" => s.tokens_min = value(line, &k, &v)?,
                "tokens_max" => s.tokens_max = value(line, &k, &v)?,
                "train" => s.train = value(line, &k, &v)?,
                "dev" => s.dev = value(line, &k, &v)?,
                "test" => s.test = value(line, &k, &v)?,
                "seed" => s.seed = value(line, &k, &v)?,
                "square" => s.square = value(line, &k, &v)?,
                "jitter" => s.jitter = value(line, &k, &v)?,
                _ => return Err(Error::Config(format!("line {line}: unknown key {k:?}"))),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn to_text(&self) -> String {
        format!(
            "frame_size = {}\nframes_min = {}\nframes_max = {}\ntokens_min = {}\ntokens_max = {}\n\
             train = {}\ndev = {}\ntest = {}\nseed = {}\nsquare = {}\njitter = {}\n",
            self.frame_size,
            self.frames_min,
            self.frames_max,
            self.tokens_min,
            self.tokens_max,
            self.train,
            self.dev,
            self.test,
            self.seed,
            self.square,
            self.jitter
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let c = RunConfig::parse("# nothing set\n\n").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.model.windows, vec![2, 6, 10]);
        let text = "seed = 7 # trailing\nwindows = 2, 4, 6\nst_modules = false\nlr=0.01\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!((c.seed, c.model.st_modules, c.lr), (7, false, 0.01));
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        let s = SyntheticCorpusSpec { train: 3, seed: 9, ..Default::default() };
        assert_eq!(SyntheticCorpusSpec::parse(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn errors() {
        for bad in
            ["bogus = 1", "seed = x", "seed = 1\nseed = 2", "no equals sign", "windows = 3", "st_modules = maybe"]
        {
            assert!(matches!(RunConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
        assert!(SyntheticCorpusSpec::parse("frames_min = 9\nframes_max = 3").is_err());
    }
}
