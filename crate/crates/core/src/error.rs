use thiserror::Error;

/// Broad failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum RomError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RomError {
    pub fn class(&self) -> ErrorClass {
        match self {
            RomError::InvalidInput(_) | RomError::Domain(_) => ErrorClass::Config,
            RomError::Numerical(_) => ErrorClass::Numerical,
            RomError::Data(_) | RomError::Format { .. } | RomError::Io(_) | RomError::Json(_) => {
                ErrorClass::Data
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, RomError>;

pub(crate) fn invalid(msg: impl Into<String>) -> RomError {
    RomError::InvalidInput(msg.into())
}
