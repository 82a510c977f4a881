use thiserror::Error;

/// Errors raised by the numerical routines and pipelines in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is singular or rank-deficient: {0}")]
    Singular(String),

    #[error("no convergence after {iterations} iterations (last residual {residual:.3e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("index out of range: {0}")]
    Range(String),

    #[error("dense capacity exceeded: {needed} entries requested, limit {limit}")]
    Capacity { needed: u128, limit: u128 },

    #[error("state has zero norm")]
    DegenerateState,

    #[error("conversion failed at site {site}: {reason}")]
    Conversion { site: usize, reason: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "window {window}: support dimension {support} exceeds capacity {capacity}; the environment bound is too small"
    )]
    BoundViolation {
        window: usize,
        support: usize,
        capacity: usize,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of an iterative numerical procedure, as opposed to bad input.
    pub fn is_convergence(&self) -> bool {
        matches!(self, Error::Convergence { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
