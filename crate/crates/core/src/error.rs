use thiserror::Error;

/// Errors produced by the propagation library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, channel counts or config values that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),
    /// A request outside what the kernels implement (e.g. a 5x5 kernel).
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// API misuse, such as asking for a gradient that was never recorded.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: usize, loss: f64 },
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
