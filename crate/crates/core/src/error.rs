use std::path::PathBuf;

/// Errors raised by the allocation toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A scalar argument fell outside its admissible domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Caller broke an operation contract (shape/dimension mismatch, empty batch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value or combination.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The decision cannot be made feasible even at minimum allocation.
    #[error("infeasible {budget} budget: minimum demand {required} exceeds budget {available}")]
    Infeasible {
        budget: &'static str,
        required: f64,
        available: f64,
    },

    /// The exhaustive search space exceeds the configured bound.
    #[error("search space of {size} grid points exceeds the bound of {bound}")]
    Capacity { size: f64, bound: f64 },

    /// Training produced a non-finite value.
    #[error("non-finite value during training: {0}")]
    NonFinite(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
