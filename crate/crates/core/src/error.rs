use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Variants are grouped by [`ErrorKind`] so operator surfaces can map them to
/// exit codes without matching on every case.
#[derive(Debug, Error)]
pub enum HaltError {
    #[error("{path}: line {line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("record `{id}`: field `{field}`: {message}")]
    Validation {
        id: String,
        field: String,
        message: String,
    },

    #[error("numeric fault in {stage}")]
    Numeric { stage: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("incompatible input: {0}")]
    Compatibility(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl HaltError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            HaltError::Numeric { .. } => ErrorKind::Numeric,
            HaltError::Config(_) | HaltError::Precondition(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HaltError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(stage: impl Into<String>) -> Self {
        HaltError::Numeric {
            stage: stage.into(),
        }
    }
}

pub type Result<T, E = HaltError> = std::result::Result<T, E>;
