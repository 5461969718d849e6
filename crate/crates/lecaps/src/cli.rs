//! Command-line interface. Flags override values from `--config`; the
//! resolved configuration is printed as TOML before any work starts.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lecaps_core::model::{count_params, primary_caps_count, ModelConfig};

use crate::bench::{benchmark, reports_csv, BenchReport};
use crate::checkpoint::Checkpoint;
use crate::config::{DatasetKind, ModelPreset, RunConfig};
use crate::datasets::load_dataset;
use crate::error::{Error, Result};
use crate::io::idx::save_idx;
use crate::train::{evaluate, sweep, train, OutputDir, Trainer};

#[derive(Debug, Parser)]
#[command(name = "lecaps", version, about = "Train, evaluate and benchmark capsule networks")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for initialisation, batching, dropout and data generation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Request bit-reproducible execution (execution is always single-threaded).
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true, value_enum)]
    pub model: Option<ModelPreset>,
    #[arg(long, global = true, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Capsule dropout rate applied to primary capsules during training.
    #[arg(long, global = true)]
    pub dropout_rate: Option<f64>,
    /// Add a second round with tightened margins.
    #[arg(long, global = true)]
    pub hard_training: bool,
    /// Checkpoint to resume from (train) or to evaluate (eval).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Independent training runs with consecutive seeds.
    #[arg(long, global = true)]
    pub repeats: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Timed iterations per benchmark repeat.
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    #[arg(long, global = true)]
    pub warmup: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model, writing metrics.csv and checkpoints to the output directory.
    Train,
    /// Report test accuracy of a checkpoint.
    Eval,
    /// Time training steps and inference on random inputs.
    Bench {
        /// Also benchmark the baseline and print the time ratios.
        #[arg(long)]
        compare: bool,
        #[arg(long, value_enum, default_value_t = BenchFormat::Text)]
        format: BenchFormat,
    },
    /// Print the parameter count per module and the primary capsule count.
    Params,
    /// Write a generated dataset as IDX files.
    GenData {
        #[arg(value_enum)]
        kind: GenKind,
    },
    /// Print the resolved configuration and exit.
    Config,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchFormat {
    Text,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    ExpandedMnist,
    AffineTest,
}

/// Applies the command-line overrides to a loaded (or default) config and
/// resolves it.
pub fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(d) = g.dataset {
        cfg.data.dataset = d;
    }
    let input = cfg.data.dataset.geometry(cfg.data.canvas);
    if let Some(m) = g.model {
        cfg.model = m.config(input);
    }
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
        cfg.data.seed = seed;
        cfg.data.affine.seed = seed;
    }
    if g.deterministic {
        cfg.deterministic = true;
    }
    if let Some(r) = g.dropout_rate {
        cfg.model.pcg.dropout_rate = r;
    }
    if g.hard_training {
        cfg.train.hard_training = true;
    }
    if let Some(o) = &g.out_dir {
        cfg.out_dir = o.clone();
    }
    if let Some(e) = g.epochs {
        cfg.train.epochs = e;
    }
    if let Some(r) = g.repeats {
        cfg.train.repeats = r;
    }
    if let Some(b) = g.batch_size {
        cfg.train.batch_size = b;
        cfg.bench.batch_size = b;
    }
    if let Some(i) = g.iters {
        cfg.bench.iters = i;
    }
    if let Some(w) = g.warmup {
        cfg.bench.warmup = w;
    }
    cfg.resolve()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    print!("{}", cfg.to_toml()?);
    println!();
    match cli.command {
        Command::Config => Ok(()),
        Command::Params => params(&cfg.model),
        Command::Train => run_train(&cfg, cli.global.checkpoint.as_deref()),
        Command::Eval => {
            let path = cli
                .global
                .checkpoint
                .as_deref()
                .ok_or_else(|| Error::Config("eval needs --checkpoint".into()))?;
            run_eval(&cfg, path)
        }
        Command::Bench { compare, format } => run_bench(&cfg, compare, format),
        Command::GenData { kind } => gen_data(&cfg, kind),
    }
}

fn params(model: &ModelConfig) -> Result<()> {
    let count = count_params(model)?;
    println!("model {} input {:?}", model.name, model.input);
    for (module, n) in &count.breakdown {
        println!("  {module:<20} {n:>12}");
    }
    println!("  {:<20} {:>12}", "total", count.total);
    println!("primary_caps {}", primary_caps_count(model)?);
    Ok(())
}

fn run_train(cfg: &RunConfig, resume: Option<&std::path::Path>) -> Result<()> {
    let (train_split, test) = load_dataset(&cfg.data)?;
    println!(
        "data train={} ({}) test={} ({})",
        train_split.len(),
        train_split.name,
        test.len(),
        test.name
    );
    let log = |prefix: String, m: &crate::train::EpochMetrics| {
        println!(
            "{prefix}epoch {} round {:?} train_loss {:.5} test_acc {:.4} lr {:.6} seconds {:.1}",
            m.epoch, m.round, m.train_loss, m.test_acc, m.lr, m.epoch_seconds
        );
    };
    if cfg.train.repeats > 1 {
        if resume.is_some() {
            return Err(Error::Config("--checkpoint cannot resume a multi-seed sweep".into()));
        }
        let summary = sweep(&cfg.model, &cfg.train, &train_split, &test, Some(&cfg.out_dir), |s, m| {
            log(format!("seed {s} "), m)
        })?;
        for (s, a) in summary.seeds.iter().zip(&summary.accuracies) {
            println!("seed {s} test_acc {a:.4}");
        }
        println!(
            "test_acc mean {:.4} min {:.4} max {:.4} over {} seeds",
            summary.mean(),
            summary.min(),
            summary.max(),
            summary.seeds.len()
        );
        return Ok(());
    }
    let trainer = match resume {
        Some(path) => Trainer::from_checkpoint(Checkpoint::load(path)?, &cfg.train)?,
        None => Trainer::new(&cfg.model, &cfg.train)?,
    };
    let out = OutputDir(cfg.out_dir.clone());
    let outcome = train(trainer, &train_split, &test, Some(&out), |m| log(String::new(), m))?;
    if let Some(m) = outcome.history.last() {
        println!("final test_acc {:.4}", m.test_acc);
    }
    println!("wrote {}", out.model().display());
    Ok(())
}

fn run_eval(cfg: &RunConfig, path: &std::path::Path) -> Result<()> {
    let ck = Checkpoint::load(path)?;
    let (_, test) = load_dataset(&cfg.data)?;
    let net = lecaps_core::model::Network::new(&ck.model)?;
    let e = evaluate(&net, &ck.params, &test, &cfg.train.loss, cfg.train.eval_batch_size)?;
    println!(
        "checkpoint {} model {} split {} samples {} test_acc {:.4} test_loss {:.5} seconds {:.2}",
        path.display(),
        ck.model.name,
        test.name,
        e.samples,
        e.accuracy,
        e.mean_loss,
        e.seconds
    );
    Ok(())
}

fn run_bench(cfg: &RunConfig, compare: bool, format: BenchFormat) -> Result<()> {
    let b = &cfg.bench;
    let dataset = cfg.data.dataset.name();
    let mut models = vec![cfg.model.clone()];
    if compare {
        models.insert(0, ModelConfig::baseline(cfg.model.input));
    }
    let mut reports = Vec::new();
    for m in &models {
        let r = benchmark(m, dataset, b.batch_size, b.iters, b.warmup, b.repeats)?;
        if format == BenchFormat::Text {
            println!("{}", r.to_line());
        }
        reports.push(r);
    }
    if format == BenchFormat::Csv {
        print!("{}", reports_csv(&reports));
    }
    if let [base, other] = &reports[..] {
        print_ratios(base, other);
    }
    Ok(())
}

fn print_ratios(base: &BenchReport, other: &BenchReport) {
    println!(
        "ratio model={} baseline={} train={:.3} infer={:.3} params={:.3}",
        other.model,
        base.model,
        other.train_seconds() / base.train_seconds(),
        other.infer_seconds() / base.infer_seconds(),
        other.param_count as f64 / base.param_count as f64
    );
}

fn gen_data(cfg: &RunConfig, kind: GenKind) -> Result<()> {
    let mut data = cfg.data.clone();
    data.dataset = match kind {
        GenKind::ExpandedMnist => DatasetKind::ExpandedMnist,
        GenKind::AffineTest => DatasetKind::AffineTest,
    };
    let (train_split, test) = load_dataset(&data)?;
    let dir = cfg.out_dir.join(data.dataset.name());
    for (split, stem) in [(&train_split, "train"), (&test, "test")] {
        let images = dir.join(format!("{stem}-images-idx3-ubyte"));
        let labels = dir.join(format!("{stem}-labels-idx1-ubyte"));
        save_idx(split, &images, &labels)?;
        println!("wrote {} images to {}", split.len(), images.display());
    }
    Ok(())
}
