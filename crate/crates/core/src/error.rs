use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in `{layer}`: {message}")]
    Shape { layer: String, message: String },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid profile: {0}")]
    Validation(String),

    #[error("index out of bounds: {0}")]
    Bounds(String),

    #[error("degenerate normalization scale: the training split is all zeros")]
    DegenerateScale,

    #[error("reference sample {index} has zero norm")]
    ZeroNorm { index: usize },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) | Error::Bounds(_) => 2,
            Error::Format { .. } | Error::Length { .. } | Error::Io(_) | Error::Csv(_) => 3,
            Error::DegenerateScale | Error::ZeroNorm { .. } => 3,
            Error::Integrity(_) | Error::Shape { .. } | Error::MissingParam(_) => 4,
        }
    }
}
