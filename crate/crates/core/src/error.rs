use thiserror::Error;

/// Errors produced by every module of the toolkit.
#[derive(Debug, Error)]
pub enum FfsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric overflow in layer {layer}")]
    NumericOverflow { layer: usize },

    #[error("numeric overflow in layer {layer} while inverting latent draw {draw}")]
    SampleOverflow { draw: usize, layer: usize },

    #[error("non-finite value while {0}")]
    NonFinite(String),

    #[error("non-finite {component} loss at iteration {iter}")]
    TrainingDiverged { iter: usize, component: &'static str },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = FfsError> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(FfsError::InvalidArgument(msg.into()))
}
