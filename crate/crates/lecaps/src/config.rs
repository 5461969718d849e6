//! Run configuration: a TOML file with `[model]`, `[train]`, `[data]` and
//! `[bench]` sections. Missing keys take the documented defaults; unknown
//! keys are rejected. Command-line flags override file values.

use std::path::{Path, PathBuf};

use lecaps_core::data::AffineSpec;
use lecaps_core::loss::LossParams;
use lecaps_core::model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    Fmnist,
    Cifar10,
    ExpandedMnist,
    AffineTest,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Fmnist => "fmnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::ExpandedMnist => "expanded-mnist",
            DatasetKind::AffineTest => "affine-test",
        }
    }

    /// `[c, h, w]` of the images the model sees.
    pub fn geometry(self, canvas: usize) -> [usize; 3] {
        match self {
            DatasetKind::Mnist | DatasetKind::Fmnist => [1, 28, 28],
            DatasetKind::Cifar10 => [3, 32, 32],
            DatasetKind::ExpandedMnist | DatasetKind::AffineTest => [1, canvas, canvas],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPreset {
    Baseline,
    Lecaps,
    LecapsSmall,
}

impl ModelPreset {
    pub fn config(self, input: [usize; 3]) -> ModelConfig {
        match self {
            ModelPreset::Baseline => ModelConfig::baseline(input),
            ModelPreset::Lecaps => ModelConfig::le_capsnet(input),
            ModelPreset::LecapsSmall => ModelConfig::le_capsnet_small(input),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Run a second round with the hard margins, starting from round one.
    pub hard_training: bool,
    /// Epochs of the hard round; defaults to `epochs`.
    pub hard_epochs: Option<usize>,
    /// Runs with seeds `seed, seed + 1, ...`; more than one reports mean and range.
    pub repeats: usize,
    pub eval_batch_size: usize,
    pub loss: LossParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            gamma: 0.96,
            batch_size: 128,
            epochs: 10,
            seed: 0,
            hard_training: false,
            hard_epochs: None,
            repeats: 1,
            eval_batch_size: 256,
            loss: LossParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        self.loss.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Root for the default file names of each dataset.
    pub dir: PathBuf,
    /// Training files: `[images, labels]` for IDX datasets, batch files for
    /// CIFAR-10. Empty = standard names under `dir`.
    pub train_files: Vec<PathBuf>,
    /// Test files, same convention. Empty with non-empty `train_files` =
    /// hold out `holdout` shuffled training samples instead.
    pub test_files: Vec<PathBuf>,
    pub holdout: usize,
    /// Training samples kept after shuffling (50,000 by default; the rest is unused).
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
    /// Seed for shuffling, placement offsets and affine draws.
    pub seed: u64,
    pub canvas: usize,
    pub affine: AffineSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            dir: PathBuf::from("data"),
            train_files: Vec::new(),
            test_files: Vec::new(),
            holdout: 10_000,
            train_size: Some(50_000),
            test_size: None,
            seed: 0,
            canvas: 40,
            affine: AffineSpec::standard(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub warmup: usize,
    pub iters: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            warmup: 1,
            iters: 3,
            repeats: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Single-threaded execution with fixed reduction order; always on.
    pub deterministic: bool,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            deterministic: true,
            out_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::ConfigNotFound(path.to_path_buf()))
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        Self::from_toml(&text)
    }

    /// Forces the model input to the dataset geometry and checks every section.
    pub fn resolve(&mut self) -> Result<()> {
        self.model.input = self.data.dataset.geometry(self.data.canvas);
        self.model.validate()?;
        self.train.validate()?;
        self.data.affine.canvas = self.data.canvas;
        self.data.affine.validate()?;
        if self.bench.batch_size == 0 || self.bench.repeats == 0 {
            return Err(Error::Config("bench batch_size and repeats must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.epochs = 3;
        cfg.data.train_files = vec!["a".into(), "b".into()];
        cfg.model = ModelConfig::baseline([1, 28, 28]);
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 0.1\n").is_err());
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[model.pcg]\ndropout = 0.1\n").is_err());
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = RunConfig::from_toml("[train]\nepochs = 2\n[data]\ndataset = \"cifar10\"\n").unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.data.dataset, DatasetKind::Cifar10);
    }

    #[test]
    fn resolve_sets_geometry() {
        let mut cfg = RunConfig::default();
        cfg.data.dataset = DatasetKind::Cifar10;
        cfg.resolve().unwrap();
        assert_eq!(cfg.model.input, [3, 32, 32]);
        cfg.train.gamma = 0.0;
        assert!(matches!(cfg.resolve(), Err(Error::Config(_))));
    }

    #[test]
    fn missing_file_has_its_own_error() {
        let err = RunConfig::load(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert!(matches!(err, Error::ConfigNotFound(_)));
        assert_eq!(err.exit_code(), 3);
    }
}
