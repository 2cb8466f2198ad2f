//! Toy model of representation superposition and the scaling-law analysis
//! built around it.
//!
//! The crate trains the sparse-feature autoencoder `y = ReLU(W Wᵀ x + b)`
//! with a signed row-norm decay that tunes how many features share the
//! hidden space, measures the geometry of the learned rows, and fits loss
//! against model width.

pub mod checkpoint;
pub mod error;
pub mod fitting;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod optim;
pub mod real;
pub mod rng;
pub mod sampler;
pub mod theory;

pub use error::{Error, Result};
pub use model::{ForwardTrace, Grads, TestLoss, ToyModel};
pub use real::Real;
pub use sampler::{Batch, FrequencyKind, FrequencyParams, FrequencySpec};
