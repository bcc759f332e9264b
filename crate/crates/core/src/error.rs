use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (grid, geometry, mask, model).
    #[error("configuration error: {0}")]
    Config(String),

    /// Array shapes that do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// A file whose contents do not follow the expected binary/text layout.
    #[error("format error: {0}")]
    Format(String),

    /// Training hit a NaN or infinite loss.
    #[error("non-finite loss at iteration {iteration} (max |grad| = {max_abs_grad:e})")]
    NonFinite { iteration: usize, max_abs_grad: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
