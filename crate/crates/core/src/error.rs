use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the domain the operation is defined on.
    #[error("input domain error: {0}")]
    InputDomain(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no snapshot stored for checkpoint step {0}")]
    MissingSnapshot(u64),

    #[error("invalid UTF-8 at byte offset {offset}")]
    InvalidEncoding { offset: usize },

    /// A pipeline stage needs an artifact that an earlier stage has not produced.
    #[error("missing dependency: stage `{stage}` has not produced {path}")]
    MissingDependency { stage: String, path: PathBuf },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
