use thiserror::Error;

pub type Result<T> = std::result::Result<T, KnitError>;

#[derive(Debug, Error)]
pub enum KnitError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("code {code} never occurs (zero marginal count)")]
    ZeroMarginal { code: usize },

    #[error("pair ({w}, {w_prime}) has zero co-occurrence count")]
    ZeroCount { w: usize, w_prime: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl KnitError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        KnitError::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        KnitError::Numerical(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        KnitError::Format(msg.into())
    }

    /// Process exit code for the command-line front end: 2 for bad input,
    /// 3 for numerical failures, 4 for I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            KnitError::InvalidInput(_)
            | KnitError::Dimension(_)
            | KnitError::ZeroMarginal { .. }
            | KnitError::ZeroCount { .. }
            | KnitError::Format(_)
            | KnitError::Version { .. }
            | KnitError::Json(_) => 2,
            KnitError::Numerical(_) => 3,
            KnitError::Io(_) => 4,
        }
    }
}
