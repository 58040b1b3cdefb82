use std::path::PathBuf;

use thiserror::Error;

use crate::data_model::Timestamp;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the command-line driver to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Training,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid timestamp {0:?}")]
    Timestamp(String),
    #[error("history for patient {expected} received an event for patient {found}")]
    MixedPatients { expected: String, found: String },
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("all {0} input lines failed to parse")]
    AllLinesFailed(usize),
    #[error("empty dataset: no patients survive preprocessing")]
    EmptyDataset,
    #[error("no test points after cut-off {0}")]
    EmptyTest(Timestamp),
    #[error("recommendation context has no matched encounter")]
    EmptyContext,
    #[error("history of patient {0} has not been sessionized")]
    Unsessionized(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at epoch {epoch}: objective is not finite")]
    Diverged { epoch: usize },
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidParameter(_) => ErrorKind::Usage,
            Error::Diverged { .. } => ErrorKind::Training,
            _ => ErrorKind::Data,
        }
    }
}
