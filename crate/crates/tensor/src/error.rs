use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    /// Operand shapes are inconsistent with the operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A scalar argument is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// The caller broke an API contract (for example, backward from a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension(msg.into()))
}
