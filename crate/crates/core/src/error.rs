//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A scalar argument is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Inconsistent configuration between pipeline stages or artifacts.
    #[error("configuration error: {0}")]
    Config(String),

    /// Text-format parse failure with a 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Input is valid but degenerate (e.g. no usable tokens).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint checksum mismatch")]
    CheckpointChecksum,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code class for the CLI: 2 for data-shaped failures,
    /// 3 for configuration-shaped failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Data(_)
            | Error::Parse { .. }
            | Error::Degenerate(_)
            | Error::CheckpointTruncated(_)
            | Error::CheckpointChecksum
            | Error::Io(_) => 2,
            Error::Dimension(_)
            | Error::Parameter(_)
            | Error::Config(_)
            | Error::CheckpointVersion { .. } => 3,
        }
    }
}
