use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use corrnet::flops::{compare_stages, count_model, REFERENCE_STAGE_SHAPES};
use corrnet::harness::config::RunConfig;
use corrnet::harness::data::{
    generate_corpus, read_corpus, read_split, read_vocabulary, write_corpus, Split, SyntheticCorpusSpec,
};
use corrnet::harness::maps::{collect_maps, write_maps};
use corrnet::harness::run::{check_vocabulary, config_for_checkpoint, evaluate, load_model, train};
use corrnet::model::Checkpoint;
use corrnet::Error;

#[derive(Parser)]
#[command(name = "corrnet", version, about = "Spatial-temporal correlation network for gloss recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic trajectory-sign corpus.
    GenData {
        /// Corpus spec (key = value lines); defaults apply to missing keys.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write run.cfg, metrics.log, model.cnpk and last.cnpk.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from <out>/last.cnpk.
        #[arg(long)]
        resume: bool,
    },
    /// Decode a split and report WER with deletion/insertion/substitution rates.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        /// Run config; defaults to run.cfg next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory; defaults to the config's corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Multiply-add counts of the configured model and of both correlation schemes.
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// Input frames.
        #[arg(long, default_value_t = 1)]
        frames: usize,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Write correlation, identification and temporal attention maps of one sample.
    DumpMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Dev)]
        split: SplitArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Kv,
}

fn gen_data(spec: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let spec = SyntheticCorpusSpec::parse(&text)?;
    let corpus = generate_corpus(&spec)?;
    write_corpus(&corpus, out)?;
    fs::write(out.join("spec.cfg"), spec.to_text())?;
    println!(
        "wrote train={} dev={} test={} to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

fn run_train(config: &Path, out: &Path, resume: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let corpus = read_corpus(&cfg.corpus).with_context(|| format!("reading corpus {}", cfg.corpus.display()))?;
    let summary = train(&cfg, &corpus, out, resume, |rec| println!("{}", rec.log_line()))?;
    println!("epochs={} best_dev_wer={:.6}", summary.epochs, summary.best_dev_wer);
    Ok(())
}

fn load(checkpoint: &Path, config: Option<&Path>, corpus: Option<&Path>) -> Result<(RunConfig, Checkpoint, PathBuf)> {
    let cfg = config_for_checkpoint(checkpoint, config)?;
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let dir = corpus.map_or_else(|| cfg.corpus.clone(), Path::to_path_buf);
    Ok((cfg, ck, dir))
}

fn run_eval(checkpoint: &Path, split: Split, config: Option<&Path>, corpus: Option<&Path>) -> Result<()> {
    let (cfg, ck, dir) = load(checkpoint, config, corpus)?;
    let vocab = read_vocabulary(&dir)?;
    check_vocabulary(&ck, &vocab)?;
    let (model, store) = load_model(&cfg, &ck)?;
    let samples = read_split(&dir, split, &vocab)?;
    let report = evaluate(&model, &store, &samples, split.name())?;
    print!("{}", report.render(&vocab));
    Ok(())
}

fn run_flops(config: &Path, frames: usize, format: Format) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let m = &cfg.model;
    let report = count_model(m, frames)?;
    let ours: Vec<_> = (0..m.windows.len())
        .map(|j| {
            let k = m.st_stage_index(j);
            let s = m.stage_size(k);
            (m.stage_channels[k], s, s)
        })
        .collect();
    let sections = [
        ("model", compare_stages(&ours, &m.windows, frames)),
        ("reference", compare_stages(&REFERENCE_STAGE_SHAPES, &m.windows, frames)),
    ];
    match format {
        Format::Text => {
            print!("{}", report.to_text());
            println!();
            println!(
                "{:<10} {:>5} {:>4} {:>4} {:>3} {:>16} {:>14} {:>9}",
                "shapes", "C", "H", "W", "L", "pairwise", "compressed", "ratio"
            );
            for (name, rows) in &sections {
                for r in rows {
                    println!(
                        "{:<10} {:>5} {:>4} {:>4} {:>3} {:>16.0} {:>14.0} {:>9.2}",
                        name,
                        r.channels,
                        r.height,
                        r.width,
                        r.window,
                        r.pairwise,
                        r.compressed,
                        r.ratio()
                    );
                }
            }
            let extra: f64 = sections[1].1.iter().map(|r| r.compressed).sum();
            let pair: f64 = sections[1].1.iter().map(|r| r.pairwise).sum();
            println!(
                "reference shapes, GFLOPs per frame: pairwise {:.6}, compressed {:.6}",
                pair / 1e9 / frames as f64,
                extra / 1e9 / frames as f64
            );
        }
        Format::Kv => {
            print!("{}", report.to_key_values());
            for (name, rows) in &sections {
                for (j, r) in rows.iter().enumerate() {
                    let p = format!("compare.{name}.{j}");
                    println!("{p}.shape={}x{}x{}", r.channels, r.height, r.width);
                    println!("{p}.window={}", r.window);
                    println!("{p}.pairwise={:.0}", r.pairwise);
                    println!("{p}.compressed={:.0}", r.compressed);
                    println!("{p}.ratio={}", r.ratio());
                }
            }
        }
    }
    Ok(())
}

fn run_dump(
    checkpoint: &Path,
    sample: usize,
    out: &Path,
    split: Split,
    config: Option<&Path>,
    corpus: Option<&Path>,
) -> Result<()> {
    let (cfg, ck, dir) = load(checkpoint, config, corpus)?;
    let vocab = read_vocabulary(&dir)?;
    check_vocabulary(&ck, &vocab)?;
    let (model, store) = load_model(&cfg, &ck)?;
    let samples = read_split(&dir, split, &vocab)?;
    let Some(s) = samples.get(sample) else {
        bail!(Error::InvalidArgument(format!(
            "sample {sample} out of range, {} has {} samples",
            split.name(),
            samples.len()
        )));
    };
    let dumps = collect_maps(&model, &store, &s.video.to_tensor())?;
    let files = write_maps(&dumps, out)?;
    println!("sample={} frames={} files={} out={}", s.id, s.video.frames, files.len(), out.display());
    Ok(())
}

fn kind(err: &anyhow::Error) -> &'static str {
    match err.downcast_ref::<Error>() {
        Some(Error::Shape { .. }) => "shape",
        Some(Error::InvalidArgument(_)) => "invalid_argument",
        Some(Error::NonFinite(_)) => "non_finite",
        Some(Error::NotScalar(_)) | Some(Error::TapeConsumed) => "internal",
        Some(Error::BudgetExceeded(_)) => "budget_exceeded",
        Some(Error::EmptyReference) | Some(Error::EmptyCorpus) => "empty_input",
        Some(Error::Diverged { .. }) => "diverged",
        Some(Error::Format(_)) => "format",
        Some(Error::Config(_)) => "config",
        Some(Error::Io(_)) => "io",
        None if err.chain().any(|e| e.is::<std::io::Error>()) => "io",
        None => "error",
    }
}

/// Prints `error kind=<kind> message="<chain>"` on one line.
fn report(kind: &str, message: &str) {
    let flat = message.replace(['\n', '\r'], " ").replace('"', "'");
    eprintln!("error kind={kind} message=\"{}\"", flat.trim());
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            report("usage", first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Train { config, out, resume } => run_train(&config, &out, resume),
        Command::Eval { checkpoint, split, config, corpus } => {
            run_eval(&checkpoint, split.into(), config.as_deref(), corpus.as_deref())
        }
        Command::Flops { config, frames, format } => run_flops(&config, frames, format),
        Command::DumpMaps { checkpoint, sample, out, split, config, corpus } => {
            run_dump(&checkpoint, sample, &out, split.into(), config.as_deref(), corpus.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(kind(&e), &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}
