//! Training and evaluation drivers.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::data::{splitmix64, Corpus, Sample};
use crate::metrics::{wer, WerBreakdown};
use crate::model::{greedy_decode, train_step, Adam, Checkpoint, CorrNet, Example, GlossSequence, Vocabulary};
use crate::tensor::Tensor;

pub const CONFIG_FILE: &str = "run.cfg";
pub const BEST_CHECKPOINT: &str = "model.cnpk";
pub const LAST_CHECKPOINT: &str = "last.cnpk";
pub const METRICS_LOG: &str = "metrics.log";

/// 64-bit FNV-1a of the newline-joined gloss names.
pub fn vocabulary_hash(v: &Vocabulary) -> u64 {
    v.glosses()
        .join("\n")
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Per-sample decode and edit counts.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub id: String,
    pub reference: GlossSequence,
    pub hypothesis: GlossSequence,
    pub counts: WerBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub split: String,
    pub samples: Vec<SampleResult>,
    pub total: WerBreakdown,
}

impl EvalReport {
    pub fn wer(&self) -> f64 {
        self.total.wer()
    }

    /// Per-sample lines followed by the corpus summary.
    pub fn render(&self, vocabulary: &Vocabulary) -> String {
        let pct = |n: usize, d: usize| 100.0 * n as f64 / d.max(1) as f64;
        let mut s = String::new();
        for r in &self.samples {
            let c = &r.counts;
            let _ = writeln!(
                s,
                "{}\twer={:.2}%\tdel={}\tins={}\tsub={}\tref={}\thyp={}",
                r.id,
                100.0 * c.wer(),
                c.deletions,
                c.insertions,
                c.substitutions,
                vocabulary.render(&r.reference),
                vocabulary.render(&r.hypothesis)
            );
        }
        let t = &self.total;
        let _ = writeln!(
            s,
            "split={} samples={} wer={:.2}% del={:.2}% ins={:.2}% sub={:.2}% ref_tokens={}",
            self.split,
            self.samples.len(),
            100.0 * t.wer(),
            pct(t.deletions, t.reference_length),
            pct(t.insertions, t.reference_length),
            pct(t.substitutions, t.reference_length),
            t.reference_length
        );
        s
    }
}

/// Greedy-decodes every sample and scores it against its labels.
pub fn evaluate(model: &CorrNet, store: &ParamStore<f32>, samples: &[Sample], split: &str) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total = WerBreakdown::default();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let logits = model.logits(store, &s.video.to_tensor::<f32>())?;
        let hyp = greedy_decode(&logits)?;
        let counts = wer(hyp.tokens(), s.labels.tokens())?;
        total.merge(&counts);
        out.push(SampleResult { id: s.id.clone(), reference: s.labels.clone(), hypothesis: hyp, counts });
    }
    Ok(EvalReport { split: split.to_string(), samples: out, total })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub dev: WerBreakdown,
    pub best_dev_wer: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} step={} train_loss={:.6} dev_wer={:.6} dev_del={} dev_ins={} dev_sub={} dev_ref={} best_dev_wer={:.6}",
            self.epoch,
            self.step,
            self.train_loss,
            self.dev.wer(),
            self.dev.deletions,
            self.dev.insertions,
            self.dev.substitutions,
            self.dev.reference_length,
            self.best_dev_wer
        )
    }
}

/// Model, parameters and optimiser state of a run in progress.
pub struct Trainer<'c> {
    pub config: RunConfig,
    pub model: CorrNet,
    pub store: ParamStore<f32>,
    pub optimizer: Adam<f32>,
    pub epoch: usize,
    pub best_dev_wer: f64,
    pub history: Vec<EpochRecord>,
    corpus: &'c Corpus,
    videos: Vec<Tensor<f32>>,
}

impl<'c> Trainer<'c> {
    pub fn new(config: RunConfig, corpus: &'c Corpus) -> Result<Self> {
        config.validate()?;
        if config.model.vocab_size != corpus.vocabulary.len() {
            return Err(Error::Config(format!(
                "vocabulary mismatch: config has vocab_size {}, corpus has {} glosses",
                config.model.vocab_size,
                corpus.vocabulary.len()
            )));
        }
        let (model, store) = CorrNet::init::<f32>(config.model.clone(), config.seed)?;
        let mut optimizer = Adam::new(&store, config.lr);
        optimizer.clip_norm = (config.clip_norm > 0.0).then_some(config.clip_norm);
        let train = limit(&corpus.train, config.train_limit);
        if train.is_empty() || limit(&corpus.dev, config.dev_limit).is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let videos = train.iter().map(|s| s.video.to_tensor()).collect();
        Ok(Self {
            config,
            model,
            store,
            optimizer,
            epoch: 0,
            best_dev_wer: f64::INFINITY,
            history: Vec::new(),
            corpus,
            videos,
        })
    }

    fn train_samples(&self) -> &'c [Sample] {
        limit(&self.corpus.train, self.config.train_limit)
    }

    fn dev_samples(&self) -> &'c [Sample] {
        limit(&self.corpus.dev, self.config.dev_limit)
    }

    /// Sample order of `epoch` (1-based), a pure function of seed and epoch.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.videos.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.config.seed ^ splitmix64(epoch as u64)));
        order.shuffle(&mut rng);
        order
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epoch + 1;
        let order = self.epoch_order(epoch);
        let samples = self.train_samples();
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<Example<'_, f32>> =
                chunk.iter().map(|&i| Example { video: &self.videos[i], target: samples[i].labels.tokens() }).collect();
            loss_sum += train_step(&self.model, &mut self.store, &mut self.optimizer, &batch)?;
            batches += 1;
        }
        let dev = evaluate(&self.model, &self.store, self.dev_samples(), "dev")?.total;
        self.epoch = epoch;
        self.best_dev_wer = self.best_dev_wer.min(dev.wer());
        let rec = EpochRecord {
            epoch,
            step: self.optimizer.steps(),
            train_loss: loss_sum / batches as f64,
            dev,
            best_dev_wer: self.best_dev_wer,
        };
        self.history.push(rec.clone());
        Ok(rec)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
            || (self.config.stop_dev_wer > 0.0 && self.best_dev_wer < self.config.stop_dev_wer)
    }

    /// Parameters plus metadata; with `full`, also optimiser state.
    pub fn checkpoint(&self, full: bool) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert_store("", &self.store);
        ck.insert_u64("meta.step", self.optimizer.steps());
        ck.insert_u64("meta.seed", self.config.seed);
        ck.insert_u64("meta.epoch", self.epoch as u64);
        ck.insert_u64("meta.vocab", vocabulary_hash(&self.corpus.vocabulary));
        if full {
            ck.insert_u64("meta.best_dev_wer", self.best_dev_wer.to_bits());
            self.optimizer.save_into(&self.store, &mut ck);
        }
        ck
    }

    /// Restores parameters, optimiser state and progress from a full checkpoint.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.get_u64("meta.seed")? != self.config.seed {
            return Err(Error::Format("checkpoint seed differs from the run config".into()));
        }
        check_vocabulary(ck, &self.corpus.vocabulary)?;
        ck.load_into("", &mut self.store)?;
        self.optimizer.load_from(&self.store, ck)?;
        self.epoch = ck.get_u64("meta.epoch")? as usize;
        self.best_dev_wer = f64::from_bits(ck.get_u64("meta.best_dev_wer")?);
        Ok(())
    }
}

fn limit(samples: &[Sample], n: usize) -> &[Sample] {
    if n == 0 {
        samples
    } else {
        &samples[..n.min(samples.len())]
    }
}

pub fn check_vocabulary(ck: &Checkpoint, vocabulary: &Vocabulary) -> Result<()> {
    if ck.get_u64("meta.vocab")? != vocabulary_hash(vocabulary) {
        return Err(Error::Format("vocabulary mismatch between checkpoint and corpus".into()));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_dev_wer: f64,
    pub history: Vec<EpochRecord>,
    pub out_dir: PathBuf,
}

/// Trains to `out`, writing `run.cfg`, `metrics.log`, the best-dev
/// `model.cnpk` and the resumable `last.cnpk`. With `resume`, continues
/// from `last.cnpk` and appends to the log.
pub fn train(
    config: &RunConfig,
    corpus: &Corpus,
    out: &Path,
    resume: bool,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainSummary> {
    fs::create_dir_all(out)?;
    let mut trainer = Trainer::new(config.clone(), corpus)?;
    let log_path = out.join(METRICS_LOG);
    if resume {
        trainer.restore(&Checkpoint::load(&out.join(LAST_CHECKPOINT))?)?;
    } else {
        fs::write(out.join(CONFIG_FILE), config.to_text())?;
        fs::write(&log_path, "")?;
        trainer.checkpoint(false).save(&out.join(BEST_CHECKPOINT))?;
        trainer.checkpoint(true).save(&out.join(LAST_CHECKPOINT))?;
    }
    while !trainer.finished() {
        let prev_best = trainer.best_dev_wer;
        let rec = trainer.run_epoch()?;
        let mut log = fs::OpenOptions::new().append(true).create(true).open(&log_path)?;
        writeln!(log, "{}", rec.log_line())?;
        if rec.dev.wer() < prev_best {
            trainer.checkpoint(false).save(&out.join(BEST_CHECKPOINT))?;
        }
        trainer.checkpoint(true).save(&out.join(LAST_CHECKPOINT))?;
        on_epoch(&rec);
    }
    Ok(TrainSummary {
        epochs: trainer.epoch,
        best_dev_wer: trainer.best_dev_wer,
        history: trainer.history,
        out_dir: out.to_path_buf(),
    })
}

/// Rebuilds the model described by `config` and loads `ck` into it.
pub fn load_model(config: &RunConfig, ck: &Checkpoint) -> Result<(CorrNet, ParamStore<f32>)> {
    let (model, mut store) = CorrNet::init::<f32>(config.model.clone(), config.seed)?;
    ck.load_into("", &mut store)?;
    Ok((model, store))
}

/// Locates the run config for a checkpoint: `explicit`, else `run.cfg` beside it.
pub fn config_for_checkpoint(checkpoint: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .map(|d| d.join(CONFIG_FILE))
            .ok_or_else(|| Error::Config("cannot locate run.cfg next to the checkpoint".into()))?,
    };
    if !path.exists() {
        return Err(Error::Config(format!("run config {} not found", path.display())));
    }
    RunConfig::load(&path)
}
