use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: expected {expected:?}, got {actual:?} ({context})")]
    Shape {
        node: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
        context: String,
    },

    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing {0}")]
    Missing(String),

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed data at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("non-finite loss at iteration {iteration}; last diagnostics: {diagnostics}")]
    Diverged { iteration: u64, diagnostics: String },

    #[error("image codec error: {0}")]
    Codec(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. }
                | Error::NonScalarLoss { .. }
                | Error::DimMismatch(_)
                | Error::InvalidArgument(_)
                | Error::Missing(_)
                | Error::Format { .. }
                | Error::Checksum { .. }
                | Error::Row { .. }
                | Error::Json(_)
        ) || matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
