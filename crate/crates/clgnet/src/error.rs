use thiserror::Error;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that cannot be combined (ragged concat, channel mismatch, ...).
    #[error("dimension error: {0}")]
    Dim(String),

    /// A configuration that cannot be realized (non-integer conv output,
    /// acceleration incompatible with the center block, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's contract (non-scalar loss, empty
    /// negative set, zero reference, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// NaN or Inf produced where the pipeline requires finite values.
    #[error("numeric error in `{op}`: {detail}")]
    Numeric { op: String, detail: String },

    /// A file failed its integrity check (bad magic, checksum, truncation).
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric { op: op.into(), detail: detail.into() }
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
