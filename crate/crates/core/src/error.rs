use thiserror::Error;

/// Errors produced by the simulator and theory toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error (line {line}): {msg}")]
    Data { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Variance certificates only exist for unbiased compressors.
    #[error("{0}: no unbiased variance certificate")]
    Biased(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// A runtime state violated a documented invariant.
    #[error("invariant violation: {0}")]
    Invariant(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(line: usize, msg: impl Into<String>) -> Self {
        Error::Data {
            line,
            msg: msg.into(),
        }
    }
}
