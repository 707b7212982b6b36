use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token index {index} out of range for codebook of size {k}")]
    IndexOutOfRange { index: u32, k: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value at element {0}")]
    NonFinite(usize),

    #[error("need {needed} distinct patches to fit the codebook, found {found}")]
    TooFewPatches { needed: usize, found: usize },

    #[error("malformed {what} at byte {offset}: {reason}")]
    Format {
        what: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("truncated {what} at byte {offset}: expected {expected} bytes, found {found}")]
    Truncated {
        what: &'static str,
        offset: usize,
        expected: usize,
        found: usize,
    },

    #[error("codebook mismatch: expected {expected}, found {found}")]
    CodebookMismatch { expected: String, found: String },

    #[error("incompatible parameters: {}", .0.join("; "))]
    Incompatible(Vec<String>),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
