use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("ingestion error at row {row}, column {col}: {msg}")]
    Ingestion { row: usize, col: usize, msg: String },

    #[error("ingestion error at line {line}: {msg}")]
    IngestionLine { line: usize, msg: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error in [{section}] key `{key}`: {msg}")]
    Config {
        section: String,
        key: String,
        msg: String,
    },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::Ingestion { .. } | Error::IngestionLine { .. } => "ingestion",
            Error::Graph(_) => "graph",
            Error::Data(_) => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config { .. } => "config",
            Error::Divergence(_) => "divergence",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
