//! Probabilistic future-frame synthesis on a procedurally generated 2D shapes
//! world.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`tape::Tape`]) whose centerpiece is a cross-convolution: a depthwise
//! convolution whose kernels are per-sample activations rather than learned
//! weights, differentiable with respect to both the kernels and the feature
//! maps. On top of it sit the five-component conditional VAE ([`network`]),
//! the shapes-world dataset generator ([`shapes`]), the training loop
//! ([`train`]) and the evaluation harness ([`eval`]).

pub mod check;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod network;
pub mod shapes;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod util;

#[cfg(test)]
pub mod testutil;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{Tape, TensorId};
pub use tensor::{Element, Tensor};
