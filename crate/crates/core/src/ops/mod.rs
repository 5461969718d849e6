//! Differentiable operations recorded on a [`crate::Tape`].

pub mod capsule;
pub mod conv;
pub mod elementwise;
pub mod matmul;
pub mod reduce;
pub mod shape;
