use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Bad magic bytes or unsupported version.
    #[error("format error: {0}")]
    Format(String),

    /// Truncated or otherwise malformed payload.
    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unknown tensor in selection: {0}")]
    Selection(String),

    #[error("incompatible models: {0}")]
    Incompatible(String),

    #[error("{count} value(s) overflowed to infinity while casting to half precision")]
    Overflow { count: usize },

    #[error("training diverged at step {step} (loss = {loss})")]
    Divergence { step: u64, loss: f32 },

    #[error("split error: {0}")]
    Split(String),
}

impl Error {
    /// True for errors caused by bad input data or arguments rather than
    /// a failure while running a computation.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Divergence { .. } => false,
            Error::Io(e) => matches!(e.kind(), std::io::ErrorKind::NotFound | std::io::ErrorKind::InvalidData),
            _ => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
