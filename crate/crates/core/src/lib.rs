//! Capsule network engine: CapsNet and LE-CapsNet on top of a small
//! reverse-mode automatic differentiation backend.
//!
//! The crate is `no_std` compatible (it needs `alloc`); the default `std`
//! feature only switches float math and the GEMM kernels to their std-backed
//! implementations. IO, wall-clock timing and the CLI live in the `lecaps`
//! crate.
//!
//! Layout:
//!
//! - [`tensor`], [`autograd`], [`ops`]: dense tensors and the tape.
//! - [`layers`]: parameterized conv, transposed conv and linear layers.
//! - [`capsule`]: squash, CFC translation, capsule dropout, primary-capsule reshape.
//! - [`pcg`]: the multi-scale Primary Capsule Generator.
//! - [`routing`]: dynamic routing by agreement and classification.
//! - [`decoder`]: FC and class-independent (deconvolutional) decoders.
//! - [`loss`]: margin loss, reconstruction loss, hard-training margins.
//! - [`model`]: architecture configs, parameter manifests and the assembled network.
//! - [`optim`]: Adam and the exponential learning-rate schedule.
//! - [`data`]: in-memory datasets, expanded MNIST and synthetic affine sets.
//! - [`gradcheck`]: finite-difference gradient checks.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autograd;
pub mod capsule;
pub mod data;
pub mod decoder;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod pcg;
pub mod routing;
pub mod tensor;

pub use autograd::{Tape, Var};
pub use element::{DType, Element};
pub use error::{Error, Result};
pub use tensor::Tensor;

/// Deterministic RNG used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate RNG from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
