use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid shapes or arguments at a public API boundary.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// A forward operation produced NaN or Inf.
    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: &'static str },

    /// Context window capacity would be exceeded.
    #[error("window capacity exceeded: need {needed} rows, capacity {capacity}")]
    Capacity { needed: usize, capacity: usize },

    /// Autodiff misuse (backward twice, non-scalar loss, ...).
    #[error("autodiff error: {0}")]
    Autodiff(String),

    /// Bad configuration file or inconsistent config values.
    #[error("config error: {0}")]
    Config(String),

    /// Training or evaluation hit a numeric failure (NaN loss, divergence).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed checkpoint or embedding-store file.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for config errors, 3 for numeric
    /// failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArg(_) | Error::Format(_) => 2,
            Error::NonFinite { .. } | Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
