//! Error taxonomy shared across the crate.
//!
//! The variants map onto the CLI exit-code contract: configuration and shape
//! misuse exit with 2, data/IO problems with 3, numeric aborts with 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad flag values, mismatched
    /// module settings, unknown ablation axes, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input data (unknown category names, non-binary masks,
    /// missing dataset files, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Tensor dimension mismatches.
    #[error("shape error: {0}")]
    Shape(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Non-finite values where finite ones are required (e.g. NaN loss).
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::Data(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
