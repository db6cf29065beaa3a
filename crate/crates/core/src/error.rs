use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("series too short: need at least {needed} values, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("degenerate series `{0}`: zero standard deviation on the training slice")]
    Degenerate(String),

    #[error("{path}: column `{column}` not found")]
    ColumnNotFound { path: PathBuf, column: String },

    #[error("{path}: row {row}, column `{column}`: cannot parse `{value}` as a number")]
    Parse {
        path: PathBuf,
        row: u64,
        column: String,
        value: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("activation `{0}` is not positively homogeneous; rescaling needs relu")]
    Activation(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("zero direction vector")]
    ZeroDirection,

    #[error("{what} of size {size} exceeds cap {cap}; {hint}")]
    Capacity {
        what: &'static str,
        size: usize,
        cap: usize,
        hint: &'static str,
    },

    #[error("matrix not symmetric: relative asymmetry {0:.3e}")]
    Asymmetric(f64),

    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Divergence { iteration: usize, loss: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("all {0} runs failed")]
    AllRunsFailed(usize),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
