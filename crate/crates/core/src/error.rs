use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A row of an input file could not be parsed or failed validation.
    #[error("{path}:{line}: {message}")]
    MalformedRow {
        path: String,
        line: usize,
        message: String,
    },

    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),

    #[error("inconsistent class count: expected {expected}, found {found} (record `{id}`)")]
    ClassCountMismatch {
        expected: usize,
        found: usize,
        id: String,
    },

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("record `{0}` has no label")]
    Unlabeled(String),

    #[error("{count} selected record(s) have no label: {}", ids.join(", "))]
    MissingLabels { count: usize, ids: Vec<String> },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite input value")]
    NonFinite,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported file version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },

    #[error("unknown record id `{0}`")]
    UnknownId(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(message: impl Into<String>) -> Self {
        Error::InvalidConfig(message.into())
    }
}
