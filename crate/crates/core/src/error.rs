use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing input file {0}")]
    MissingFile(PathBuf),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: {message}")]
    Validation {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("unknown split `{0}` (expected train, valid or test)")]
    UnknownSplit(String),

    #[error("relations already carry inverse companions")]
    AlreadyAugmented,

    #[error("context cache: {0}")]
    Cache(String),

    #[error("missing context: {0}")]
    MissingContext(String),

    #[error("language model: {0}")]
    Lm(String),

    #[error("unknown phrase `{0}`")]
    UnknownPhrase(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}; diagnostics written to {dump}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        dump: PathBuf,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
