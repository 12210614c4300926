use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NmtError>;

#[derive(Debug, Error)]
pub enum NmtError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{what} out of range: {value} (limit {limit})")]
    OutOfRange {
        what: &'static str,
        value: usize,
        limit: usize,
    },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("objective {objective} requires the {head} prediction head")]
    MissingHead {
        objective: &'static str,
        head: &'static str,
    },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("checkpoint already exists: {0}")]
    CheckpointExists(PathBuf),

    #[error("missing parameter tensor `{0}`")]
    MissingParam(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NmtError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        NmtError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NmtError::File {
            path: path.into(),
            source,
        }
    }
}
