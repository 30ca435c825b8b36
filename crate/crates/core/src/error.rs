use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("dataset has no labeled rows")]
    EmptyLabels,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what}: size {size} exceeds limit {limit}")]
    Size {
        what: &'static str,
        size: usize,
        limit: usize,
    },

    #[error("matrix not positive definite after jitter escalation to {jitter:e}")]
    Conditioning { jitter: f64 },

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("point {point} lost every transition weight after landmark dropping")]
    EmptyRow { point: usize },

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("no successful runs to summarize")]
    NoSuccessfulRuns,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
