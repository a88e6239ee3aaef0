use std::io;

use thiserror::Error;

/// Errors produced by the quantization engine and its file formats.
#[derive(Debug, Error)]
pub enum SkvqError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("code {code} out of range for {bits}")]
    CodeOutOfRange { code: u32, bits: String },

    #[error("non-finite input value at index {0}")]
    NonFinite(usize),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("checksum mismatch: expected {expected:#010x}, found {found:#010x}")]
    Checksum { expected: u32, found: u32 },

    #[error("artifact does not match model: {0}")]
    Mismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl SkvqError {
    /// Short stable identifier, used for machine-parseable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            SkvqError::InvalidArgument(_) => "invalid_argument",
            SkvqError::Shape(_) => "shape",
            SkvqError::CodeOutOfRange { .. } => "code_range",
            SkvqError::NonFinite(_) => "non_finite",
            SkvqError::Format(_) => "format",
            SkvqError::Checksum { .. } => "checksum",
            SkvqError::Mismatch(_) => "mismatch",
            SkvqError::Config(_) => "config",
            SkvqError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, SkvqError>;

pub(crate) fn invalid(msg: impl Into<String>) -> SkvqError {
    SkvqError::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> SkvqError {
    SkvqError::Shape(msg.into())
}

pub(crate) fn format_err(msg: impl Into<String>) -> SkvqError {
    SkvqError::Format(msg.into())
}
