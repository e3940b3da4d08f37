use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A sampler broke its own declared shape or finiteness contract.
    #[error("contract violation at trial {trial}: {reason}")]
    ContractViolation { trial: u64, reason: String },

    /// A precondition of a compressor stage does not hold.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("unsupported activation: {0}")]
    UnsupportedActivation(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    /// Structured-format errors carry the path of the offending field.
    #[error("format error at `{path}`: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
