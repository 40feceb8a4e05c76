use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid model, dataset or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Values that violate a data contract (label range, palette, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Misuse of an API contract, e.g. backward from a non-scalar.
    #[error("contract error: {0}")]
    Contract(String),

    /// Malformed binary file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// Checkpoint written for a different model configuration.
    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite loss at step {step} (lr {lr}); recent losses: {history:?}")]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        history: Vec<f64>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
