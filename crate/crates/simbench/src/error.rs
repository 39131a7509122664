use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Core(#[from] missglasso::Error),
    #[error("column {column} has no observed values after deletion")]
    AllMissingColumn { column: usize },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

pub(crate) fn invalid(msg: impl Into<String>) -> SimError {
    SimError::Invalid(msg.into())
}
