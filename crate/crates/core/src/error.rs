use std::path::PathBuf;

use thiserror::Error;

/// Which side of the siamese pair a BN failure happened on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Online,
    Target,
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Branch::Online => write!(f, "online"),
            Branch::Target => write!(f, "target"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate batch variance {variance:e} (batch of {len})")]
    DegenerateVariance { variance: f64, len: usize },

    #[error("degenerate batch variance at step {step}, {branch} branch, coordinate {coordinate}: {variance:e}")]
    DegenerateBatch {
        step: usize,
        branch: Branch,
        coordinate: usize,
        variance: f64,
    },

    #[error("degenerate population state: {0}")]
    Degenerate(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("trajectory is missing field `{0}`")]
    MissingField(String),

    #[error("sequence did not reach {target} within {cap} iterations")]
    CapExceeded { target: f64, cap: usize },

    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
