use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("attention row {row} has every key position masked")]
    FullyMasked { row: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("cannot parse prompt {prompt:?}: {reason}")]
    Prompt { prompt: String, reason: String },

    #[error("checkpoint format error in {path:?}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Broad category used by front-ends to pick exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Shape { .. } | Error::NonFinite { .. } | Error::FullyMasked { .. } => ErrorKind::Numeric,
            Error::Config(_) | Error::Prompt { .. } => ErrorKind::Config,
            Error::Data(_) | Error::Format { .. } | Error::Io { .. } | Error::Json(_) => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}
