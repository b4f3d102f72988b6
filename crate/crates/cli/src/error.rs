use halt_core::{ErrorKind, HaltError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Halt(#[from] HaltError),
    #[error("{0}")]
    Usage(String),
    /// Data problems already reported line by line on stderr.
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Halt(e) => match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            },
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Halt(HaltError::Json(e))
    }
}

pub type CliResult<T> = Result<T, CliError>;
