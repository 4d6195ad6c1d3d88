//! Imbalanced time-series classification.
//!
//! Dataset loading and imbalance generators, class separability, a small
//! 1-D convolutional classifier with hand-written gradients, cost-sensitive
//! losses (including the separability-driven GMSE), balanced batch
//! sampling, training and cross-validation, and evaluation metrics.

pub mod cli;
pub mod data;
pub mod error;
pub mod fsutil;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod sampling;
pub mod separability;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
