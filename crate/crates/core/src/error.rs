use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed at `{path}`: {message}")]
    Validation { path: String, message: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{file}:{line}: {message}")]
    Parse {
        file: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{file}: missing required column `{column}`")]
    Schema { file: PathBuf, column: String },

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Stable machine-readable code printed by the CLI ahead of the message.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "E_SHAPE",
            Error::Domain(_) => "E_DOMAIN",
            Error::Input(_) => "E_INPUT",
            Error::Config(_) => "E_CONFIG",
            Error::Validation { .. } => "E_VALIDATION",
            Error::Usage(_) => "E_USAGE",
            Error::Parse { .. } => "E_PARSE",
            Error::Schema { .. } => "E_SCHEMA",
            Error::Generation(_) => "E_GENERATION",
            Error::Divergence { .. } => "E_DIVERGENCE",
            Error::Io { .. } => "E_IO",
            Error::Json { .. } => "E_JSON",
        }
    }

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

    pub(crate) fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            message: message.into(),
        }
    }
}
