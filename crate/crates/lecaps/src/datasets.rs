//! Resolves a [`DataConfig`] into train and test splits.

use std::path::{Path, PathBuf};

use lecaps_core::data::{affine_test_set, expand_mnist, DatasetSplit};
use lecaps_core::seeded_rng;

use crate::config::{DataConfig, DatasetKind};
use crate::error::{Error, Result};
use crate::io::cifar::load_cifar10_binary;
use crate::io::idx::load_idx;

/// Standard file names under `dir` as `(train, test)`.
pub fn default_files(kind: DatasetKind, dir: &Path) -> (Vec<PathBuf>, Vec<PathBuf>) {
    let idx = |sub: &str| {
        let d = dir.join(sub);
        (
            vec![d.join("train-images-idx3-ubyte"), d.join("train-labels-idx1-ubyte")],
            vec![d.join("t10k-images-idx3-ubyte"), d.join("t10k-labels-idx1-ubyte")],
        )
    };
    match kind {
        DatasetKind::Mnist | DatasetKind::ExpandedMnist | DatasetKind::AffineTest => idx("mnist"),
        DatasetKind::Fmnist => idx("fmnist"),
        DatasetKind::Cifar10 => {
            let d = dir.join("cifar-10-batches-bin");
            (
                (1..=5).map(|i| d.join(format!("data_batch_{i}.bin"))).collect(),
                vec![d.join("test_batch.bin")],
            )
        }
    }
}

fn load_files(kind: DatasetKind, files: &[PathBuf], name: &str) -> Result<DatasetSplit> {
    match kind {
        DatasetKind::Cifar10 => load_cifar10_binary(files, name),
        _ => match files {
            [images, labels] => load_idx(images, labels, name),
            _ => Err(Error::Config(format!(
                "IDX datasets need [images, labels] files, got {} paths",
                files.len()
            ))),
        },
    }
}

fn limit(split: DatasetSplit, n: Option<usize>) -> Result<DatasetSplit> {
    match n {
        Some(n) if n < split.len() => Ok(split.take(n)?),
        _ => Ok(split),
    }
}

/// `(train, test)` for the configured dataset.
///
/// Training data is shuffled with `cfg.seed` before `train_size` samples are
/// kept. Without test files, the first `holdout` shuffled samples become the
/// test split. Expanded MNIST places both splits on the canvas; the affine
/// set trains on expanded MNIST and tests on randomly transformed digits.
pub fn load_dataset(cfg: &DataConfig) -> Result<(DatasetSplit, DatasetSplit)> {
    let (default_train, default_test) = default_files(cfg.dataset, &cfg.dir);
    let custom = !cfg.train_files.is_empty();
    let train_files = if custom { cfg.train_files.clone() } else { default_train };
    let test_files = match (custom, cfg.test_files.is_empty()) {
        (_, false) => cfg.test_files.clone(),
        (true, true) => Vec::new(),
        (false, true) => default_test,
    };
    let base = cfg.dataset.name();
    let pool = load_files(cfg.dataset, &train_files, &format!("{base}-train"))?.shuffled(cfg.seed);
    let (train, test) = if test_files.is_empty() {
        let (mut test, mut train) = pool.split_at(cfg.holdout)?;
        test.name = format!("{base}-holdout");
        train.name = format!("{base}-train");
        (train, test)
    } else {
        (pool, load_files(cfg.dataset, &test_files, &format!("{base}-test"))?)
    };
    let train = limit(train, cfg.train_size)?;
    let test = limit(test, cfg.test_size)?;
    match cfg.dataset {
        DatasetKind::ExpandedMnist => {
            let (train, _) = expand_mnist(&train, cfg.canvas, &mut seeded_rng(cfg.seed ^ 0x7e57))?;
            let (test, _) = expand_mnist(&test, cfg.canvas, &mut seeded_rng(cfg.seed ^ 0x7e58))?;
            Ok((train, test))
        }
        DatasetKind::AffineTest => {
            let (train, _) = expand_mnist(&train, cfg.canvas, &mut seeded_rng(cfg.seed ^ 0x7e57))?;
            let mut spec = cfg.affine;
            spec.canvas = cfg.canvas;
            let test = affine_test_set(&test, &spec)?;
            Ok((train, test))
        }
        _ => Ok((train, test)),
    }
}
