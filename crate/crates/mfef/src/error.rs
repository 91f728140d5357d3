//! Library-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MfefError {
    /// A tensor or parameter shape is structurally invalid.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// A configuration value violates its contract.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A dataset file does not match the expected binary layout.
    #[error("data format error at byte {offset}: {message}")]
    DataFormat { offset: usize, message: String },

    /// A loss term became NaN or infinite during training.
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    /// A checkpoint file is missing, truncated, or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MfefError>;

impl MfefError {
    /// Process exit code for the CLI: invalid config maps to 2, a
    /// non-finite loss to 3, everything else to 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            MfefError::InvalidConfig(_) => 2,
            MfefError::NonFiniteLoss(_) => 3,
            _ => 1,
        }
    }
}
