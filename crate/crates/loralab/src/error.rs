//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by tensor ops, adapters, the model, training, and file IO.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors with incompatible shapes met in an operation.
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch { op: &'static str, lhs: String, rhs: String },

    /// An operation required a specific rank or extent that the input lacks.
    #[error("{op}: bad shape {shape}: {detail}")]
    BadShape { op: &'static str, shape: String, detail: String },

    /// `backward` was called on a non-scalar tensor.
    #[error("backward requires a scalar loss, got shape {shape}")]
    NonScalarLoss { shape: String },

    /// `backward` was called twice on the same graph without a reset.
    #[error("backward already ran on this graph; call reset() or build a new graph")]
    BackwardConsumed,

    /// `backward` was called on a graph that recorded no operations.
    #[error("backward called on an empty graph")]
    EmptyGraph,

    /// Forward or merge was attempted on an adapter in the wrong merge state.
    #[error("adapter state error: {0}")]
    AdapterState(String),

    /// A configuration value failed validation.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A runtime input (token ids, batch shape) failed validation.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Training loss became non-finite.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    /// A run-spec file failed to parse or validate.
    #[error("spec error in {path}: {message}")]
    Spec { path: String, message: String },

    /// A checkpoint file was malformed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape_mismatch(
        op: &'static str,
        lhs: &[usize],
        rhs: &[usize],
    ) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: format!("{lhs:?}"),
            rhs: format!("{rhs:?}"),
        }
    }

    pub(crate) fn bad_shape(op: &'static str, shape: &[usize], detail: impl Into<String>) -> Self {
        Error::BadShape {
            op,
            shape: format!("{shape:?}"),
            detail: detail.into(),
        }
    }
}
