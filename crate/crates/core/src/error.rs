use thiserror::Error;

/// Errors produced by the denoising pipeline and its supporting tools.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    DimensionMismatch {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("non-finite pixel value at index {0}")]
    NonFinite(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("denoiser failed: {0}")]
    Denoiser(String),

    #[error("image format error: {0}")]
    Format(String),

    #[error("lookup table file error: {0}")]
    LutFile(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidParameter(msg.into()))
}
