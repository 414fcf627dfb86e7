use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate shape: {0}")]
    DegenerateShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("pyramid too deep: level {level} extent underflows")]
    PyramidTooDeep { level: usize },

    #[error("input too small for encoder depth: {0}")]
    EncoderUnderflow(String),

    #[error("positive missing from queue")]
    PositiveMissingFromQueue,

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error in {file}: {reason}")]
    Format { file: String, reason: String },

    #[error("missing entry: {0}")]
    MissingEntry(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
