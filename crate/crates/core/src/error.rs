use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("autodiff error: {0}")]
    Graph(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unknown id: {0}")]
    UnknownId(String),

    #[error("cold-start user {0}: no engagement history")]
    ColdStart(String),

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::NonFinite { .. } => "non_finite",
            Error::Graph(_) => "graph",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::UnknownId(_) => "unknown_id",
            Error::ColdStart(_) => "cold_start",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
