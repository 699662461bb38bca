use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DcfError>;

#[derive(Debug, Error)]
pub enum DcfError {
    #[error("unsupported Bessel order {order} (ceiling {ceiling})")]
    UnsupportedOrder { order: usize, ceiling: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("operation not supported for {0}")]
    Unsupported(String),

    #[error("deformation not admissible: {0}")]
    Admissibility(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl DcfError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        DcfError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DcfError::InvalidArgument(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        DcfError::Format {
            offset,
            message: msg.into(),
        }
    }

    /// True for errors caused by the filesystem rather than by bad input.
    pub fn is_io(&self) -> bool {
        matches!(self, DcfError::Io(_))
    }
}
