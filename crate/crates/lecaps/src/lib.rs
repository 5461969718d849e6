//! Training, evaluation and benchmarking of capsule networks built on
//! `lecaps-core`.
//!
//! - [`config`]: TOML run configuration and its defaults
//! - [`io`]: IDX and CIFAR-10 binary readers and writers
//! - [`datasets`]: resolves a [`config::DataConfig`] into train and test splits
//! - [`checkpoint`]: self-describing binary checkpoints
//! - [`train`]: epochs, evaluation, hard-training rounds and seed sweeps
//! - [`bench`]: parameter counts and step timings
//! - [`cli`]: the `lecaps` command line

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod io;
pub mod train;

pub use error::{Error, Result};
