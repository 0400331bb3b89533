//! Batch-normalization-centric domain adaptation for image classifiers.
//!
//! The crate bundles a small reverse-mode autodiff engine, the layers of a
//! desk-scale global/local/fusion classifier, batch normalization with three
//! statistics regimes (training, frozen moving averages, test-time batch
//! statistics), gradient reversal for partial domain-adversarial training,
//! a synthetic multi-domain image benchmark, ranking metrics, and BN
//! activation divergence diagnostics.

pub mod adversarial;
pub mod batchnorm;
pub mod checkpoint;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod graph;
mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

#[cfg(test)]
mod test_util;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
