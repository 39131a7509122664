use thiserror::Error;

use crate::glasso::GlassoSolution;

/// Errors raised by the estimators and their numerical kernels.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-positive diagonal entry at index {index}")]
    ZeroDiagonal { index: usize },

    /// Block coordinate descent hit its sweep budget. The best iterate is kept
    /// so that callers inside an outer loop can still use it.
    #[error("graphical lasso did not converge within {sweeps} sweeps")]
    GlassoNotConverged {
        sweeps: usize,
        best: Box<GlassoSolution>,
    },

    #[error("did not converge within {iterations} iterations")]
    NotConverged { iterations: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("response vector has zero sum of squares")]
    ZeroResponse,

    #[error("training part of fold {fold} has no observations in column {column}")]
    FoldDegenerate { fold: usize, column: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
