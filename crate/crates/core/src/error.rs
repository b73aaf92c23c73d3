use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum LunaError {
    /// A tensor shape or call contract was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A required electrode was not found in the input montage.
    #[error("missing electrode '{0}'")]
    MissingElectrode(String),

    /// A montage failed validation.
    #[error("invalid montage: {0}")]
    Montage(String),

    /// A file could not be parsed.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("version mismatch at byte {offset}: expected {expected}, found {found}")]
    Version { offset: u64, expected: u32, found: String },

    #[error("size mismatch at byte {offset}: expected {expected} bytes, found {actual}")]
    Size { offset: u64, expected: u64, actual: u64 },

    #[error("non-finite value at byte {offset}")]
    NonFinite { offset: u64 },

    /// Training produced a non-finite loss.
    #[error("numeric divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LunaError>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(LunaError::Contract(msg.into()))
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(LunaError::Config(msg.into()))
}
