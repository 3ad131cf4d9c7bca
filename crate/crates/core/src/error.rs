use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Architecture descriptor problems. `line` is 1-based when known.
    #[error("descriptor error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Descriptor { line: Option<usize>, message: String },

    /// Architecture and bundle disagree about a layer.
    #[error("layer `{layer}`: {message}")]
    Validation { layer: String, message: String },

    #[error("bundle error: {0}")]
    Bundle(String),

    #[error("tensor `{name}`: {message}")]
    Tensor { name: String, message: String },

    #[error("plan error: {0}")]
    Plan(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
