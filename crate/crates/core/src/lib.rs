//! Training with per-feature random learning rates.
//!
//! Every feature (unit or convolution filter) of the network body gets its own
//! learning rate drawn log-uniformly from an interval. The output layer is
//! replicated into several clones with learning rates spread over the same
//! interval, and their predictions are mixed with weights maintained online by
//! a switch-distribution posterior.

pub mod averaging;
pub mod checkpoint;
pub mod datasets;
pub mod engine;
pub mod error;
pub mod features;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
