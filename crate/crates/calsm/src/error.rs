//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, inference, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix or vector had a different size than its companion data.
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A quantity that is nonnegative by construction came out negative,
    /// or a linear solve failed; indicates a numerical breakdown.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Operation requires at least one positive edge.
    #[error("the network has no positive edges")]
    EmptyEdgeSet,

    /// Input values outside the documented domain (e.g. non-binary adjacency).
    #[error("invalid data at {location}: {message}")]
    InvalidData { location: String, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
