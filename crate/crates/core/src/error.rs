//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("attention row {0} is fully masked")]
    FullyMaskedRow(usize),

    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("object placement failed after {0} rejection attempts")]
    Placement(usize),

    #[error("ROI contains no points")]
    EmptyRoi,

    #[error("token block overflow: {got} tokens exceed capacity {cap}")]
    BlockOverflow { got: usize, cap: usize },

    #[error("sequence length {got} exceeds context length {cap}")]
    ContextOverflow { got: usize, cap: usize },

    #[error("unknown parameter {0}")]
    UnknownParameter(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("unsupported instruction {given:?}; supported forms: {supported}")]
    UnsupportedInstruction { given: String, supported: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, err: std::io::Error) -> Self {
        Error::Io(context.into(), err)
    }

    /// User-correctable errors exit with code 1, internal failures with 2.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Format(_)
                | Error::UnsupportedInstruction { .. }
                | Error::InvalidValue(_)
                | Error::Io(_, _)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
