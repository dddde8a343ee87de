use thiserror::Error;

/// Errors surfaced at module boundaries. Shape mismatches inside tensor
/// arithmetic are programming errors and panic with both shapes in the
/// message instead.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad sizes, inconsistent settings).
    #[error("configuration error: {0}")]
    Config(String),
    /// Non-finite value detected during computation.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Malformed input data (bad token sequence, corrupt checkpoint, ...).
    #[error("data error: {0}")]
    Data(String),
    /// API misuse (wrong call pattern, degenerate request).
    #[error("usage error: {0}")]
    Usage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code per the CLI contract: 1 for contract errors,
    /// 2 for numeric errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
