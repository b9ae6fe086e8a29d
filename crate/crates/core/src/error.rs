//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid layer/model/run configuration. Raised before any compute.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid input data (bad labels, missing slices, malformed manifests).
    #[error("data error: {0}")]
    Data(String),

    /// Binary file did not parse; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Checksum or version mismatch on a checkpoint or tensor file.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Non-finite gradients or missing gradients during optimization.
    #[error("gradient error: {0}")]
    Grad(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
