//! Training loop: Adam, per-epoch exponential decay, optional hard round,
//! checkpoints and a metrics CSV.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lecaps_core::data::{epoch_batches, DatasetSplit};
use lecaps_core::loss::{hard_round_params, LossParams, Round};
use lecaps_core::model::{ModelConfig, Network};
use lecaps_core::optim::{lr_at_epoch, Adam, AdamConfig};
use lecaps_core::params::ParamStore;
use lecaps_core::{seeded_rng, Rng, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::io::write_file;

pub const METRICS_HEADER: &str = "epoch,train_loss,test_acc,lr,epoch_seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based, counted across both rounds.
    pub epoch: usize,
    pub round: Round,
    pub train_loss: f64,
    pub test_acc: f64,
    pub test_loss: f64,
    pub lr: f64,
    pub epoch_seconds: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3}",
            self.epoch, self.train_loss, self.test_acc, self.lr, self.epoch_seconds
        )
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in history {
        let _ = writeln!(out, "{}", m.csv_row());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub seconds: f64,
    pub samples: usize,
}

/// Accuracy and mean loss over a split in eval mode; parameters are untouched.
pub fn evaluate(
    net: &Network,
    params: &ParamStore<f32>,
    split: &DatasetSplit,
    loss: &LossParams,
    batch_size: usize,
) -> Result<Evaluation> {
    if split.image_shape() != net.config.input {
        return Err(Error::CheckpointMismatch(format!(
            "model expects {:?} inputs, split {} has {:?}",
            net.config.input,
            split.name,
            split.image_shape()
        )));
    }
    let start = Instant::now();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut rng = seeded_rng(0);
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = split.batch::<f32>(chunk)?;
        let (pred, l) = net.evaluate_batch(params, x, &y, loss, &mut rng)?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        loss_sum += l * chunk.len() as f64;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / split.len() as f64,
        mean_loss: loss_sum / split.len() as f64,
        seconds: start.elapsed().as_secs_f64(),
        samples: split.len(),
    })
}

/// Mutable training state; everything in it goes into a [`Checkpoint`].
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Network,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub rng: Rng,
    /// Epochs completed in the current round.
    pub epoch: usize,
    pub round: Round,
    pub config: TrainConfig,
}

impl Trainer {
    /// Fresh weights drawn from `config.seed`; the same generator then drives
    /// batch order and dropout.
    pub fn new(model: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = Network::new(model)?;
        let mut rng = seeded_rng(config.seed);
        let params = net.init_params(&mut rng);
        let adam = Adam::new(&params, AdamConfig::default());
        Ok(Self {
            net,
            params,
            adam,
            rng,
            epoch: 0,
            round: Round::Standard,
            config: config.clone(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = Network::new(&ck.model)?;
        Ok(Self {
            net,
            params: ck.params,
            adam: ck.adam,
            rng: ck.rng,
            epoch: ck.epoch,
            round: ck.round,
            config: config.clone(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.net.config.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            round: self.round,
            rng: self.rng.clone(),
        }
    }

    /// Margins of the current round.
    pub fn loss_params(&self) -> LossParams {
        match self.round {
            Round::Standard => self.config.loss,
            Round::Hard => hard_round_params(&self.config.loss),
        }
    }

    pub fn lr(&self) -> f64 {
        lr_at_epoch(self.config.lr, self.config.gamma, self.epoch)
    }

    /// One Adam step on a batch. Returns the batch loss.
    pub fn train_step(&mut self, images: Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let loss = self.loss_params();
        let (value, grads) = self.net.gradients(&self.params, images, labels, &loss, &mut self.rng)?;
        if !value.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                round: self.round_number(),
                epoch: self.epoch + 1,
                step: self.adam.step as usize + 1,
                loss: value,
            });
        }
        let lr = self.lr();
        self.adam.step(&mut self.params, &grads, lr)?;
        Ok(value)
    }

    /// One pass over `train` in seeded random order. Returns the mean loss.
    pub fn train_epoch(&mut self, train: &DatasetSplit) -> Result<f64> {
        let batches = epoch_batches(train.len(), self.config.batch_size, &mut self.rng);
        let mut total = 0.0;
        for idx in &batches {
            let (x, y) = train.batch::<f32>(idx)?;
            total += self.train_step(x, &y)? * idx.len() as f64;
        }
        self.epoch += 1;
        Ok(total / train.len() as f64)
    }

    /// Second round: hard margins, fresh optimizer moments, schedule restarted.
    pub fn start_hard_round(&mut self) {
        self.round = Round::Hard;
        self.epoch = 0;
        self.adam = Adam::new(&self.params, AdamConfig::default());
    }

    pub fn evaluate(&self, split: &DatasetSplit) -> Result<Evaluation> {
        evaluate(&self.net, &self.params, split, &self.loss_params(), self.config.eval_batch_size)
    }

    fn round_number(&self) -> usize {
        match self.round {
            Round::Standard => 1,
            Round::Hard => 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub trainer: Trainer,
}

/// Where [`train`] writes `metrics.csv`, `last.ckpt`, `round1.ckpt` (hard
/// training only) and `model.ckpt`.
#[derive(Debug, Clone)]
pub struct OutputDir(pub PathBuf);

impl OutputDir {
    pub fn metrics(&self) -> PathBuf {
        self.0.join("metrics.csv")
    }

    pub fn last(&self) -> PathBuf {
        self.0.join("last.ckpt")
    }

    pub fn round1(&self) -> PathBuf {
        self.0.join("round1.ckpt")
    }

    pub fn model(&self) -> PathBuf {
        self.0.join("model.ckpt")
    }
}

/// Runs (or resumes) the configured rounds. `on_epoch` sees each epoch's
/// metrics as they are produced.
pub fn train(
    mut trainer: Trainer,
    train: &DatasetSplit,
    test: &DatasetSplit,
    out: Option<&OutputDir>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    let cfg = trainer.config.clone();
    let hard_epochs = cfg.hard_epochs.unwrap_or(cfg.epochs);
    let mut history = Vec::new();
    let write_metrics = |history: &[EpochMetrics]| -> Result<()> {
        match out {
            Some(o) => write_file(&o.metrics(), metrics_csv(history).as_bytes()),
            None => Ok(()),
        }
    };
    loop {
        let (budget, offset) = match trainer.round {
            Round::Standard => (cfg.epochs, 0),
            Round::Hard => (hard_epochs, cfg.epochs),
        };
        while trainer.epoch < budget {
            let lr = trainer.lr();
            let start = Instant::now();
            let train_loss = trainer.train_epoch(train)?;
            let eval = trainer.evaluate(test)?;
            let m = EpochMetrics {
                epoch: offset + trainer.epoch,
                round: trainer.round,
                train_loss,
                test_acc: eval.accuracy,
                test_loss: eval.mean_loss,
                lr,
                epoch_seconds: start.elapsed().as_secs_f64(),
            };
            on_epoch(&m);
            history.push(m);
            write_metrics(&history)?;
            if let Some(o) = out {
                trainer.checkpoint().save(&o.last())?;
            }
        }
        if trainer.round == Round::Standard && cfg.hard_training {
            if let Some(o) = out {
                trainer.checkpoint().save(&o.round1())?;
            }
            trainer.start_hard_round();
            continue;
        }
        break;
    }
    if let Some(o) = out {
        trainer.checkpoint().save(&o.model())?;
    }
    Ok(TrainOutcome { history, trainer })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
}

impl SweepSummary {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.accuracies.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `config.repeats` independent runs with seeds `seed, seed + 1, ...`; each
/// writes to `out/seed-<n>` when an output directory is given.
pub fn sweep(
    model: &ModelConfig,
    config: &TrainConfig,
    train_split: &DatasetSplit,
    test: &DatasetSplit,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(u64, &EpochMetrics),
) -> Result<SweepSummary> {
    let mut summary = SweepSummary {
        seeds: Vec::new(),
        accuracies: Vec::new(),
    };
    for r in 0..config.repeats as u64 {
        let seed = config.seed + r;
        let cfg = TrainConfig {
            seed,
            ..config.clone()
        };
        let dir = out.map(|o| OutputDir(o.join(format!("seed-{seed}"))));
        let outcome = train(Trainer::new(model, &cfg)?, train_split, test, dir.as_ref(), |m| on_epoch(seed, m))?;
        let acc = outcome.history.last().map_or(0.0, |m| m.test_acc);
        summary.seeds.push(seed);
        summary.accuracies.push(acc);
    }
    Ok(summary)
}
