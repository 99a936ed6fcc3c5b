//! loralab: a desk-scale laboratory for parameter-efficient fine-tuning.
//!
//! The crate wires a small trainable transformer to two adaptation methods,
//! low-rank adapters and task-aware representation filters, and surrounds
//! them with the verification machinery needed to trust the results:
//! finite-difference gradient checks, an independent parameter-count audit,
//! merge-equivalence probes, and deterministic sweep harnesses.

pub mod adapters;
pub mod error;
pub mod model;
pub mod checkpoint;
pub mod commands;
pub mod metrics;
pub mod rng;
pub mod runspec;
pub mod sweep;
pub mod task;
pub mod tensor;
pub mod train;
pub mod verify;

pub use adapters::{LoraAdapter, Similarity, TaskAwareFilter};
pub use error::{Error, Result};
pub use model::{AdaptedModel, AdapterPlacement, FilterScope, FilterSite, MatrixName, ModelConfig};
pub use tensor::{Dtype, Element, Graph, Tensor};

/// Runs every code block in the guide as a doc-test, so the book cannot
/// drift from the library it documents.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/tensors-and-autodiff.md")]
    pub struct TensorsAndAutodiff;
    #[doc = include_str!("../../../book/src/low-rank-adapters.md")]
    pub struct LowRankAdapters;
    #[doc = include_str!("../../../book/src/task-aware-filters.md")]
    pub struct TaskAwareFilters;
    #[doc = include_str!("../../../book/src/transformer-testbed.md")]
    pub struct TransformerTestbed;
    #[doc = include_str!("../../../book/src/training-and-sweeps.md")]
    pub struct TrainingAndSweeps;
    #[doc = include_str!("../../../book/src/verification.md")]
    pub struct Verification;
    #[doc = include_str!("../../../book/src/cli-and-files.md")]
    pub struct CliAndFiles;
}
