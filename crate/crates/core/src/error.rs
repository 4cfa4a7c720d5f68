use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{source_name}:{line}: {field}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        field: String,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("query ({x:.3}, {y:.3}) outside the interpolable terrain extent")]
    OutOfBounds { x: f64, y: f64 },

    #[error("degenerate path: {0}")]
    DegeneratePath(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in layer `{layer}`: {message}")]
    Numeric { layer: String, message: String },

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(
        source_name: impl Into<String>,
        line: usize,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            line,
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
