use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("model stage error: {0}")]
    Stage(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("unsupported file version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("divergence: {0}")]
    Divergence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI, one per failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingArtifact(_) => 3,
            Error::Config(_) | Error::Corrupt { .. } | Error::Version { .. } => 4,
            Error::Numeric(_) | Error::Divergence(_) | Error::Invariant(_) => 5,
            Error::ShapeMismatch(_) | Error::IndexOutOfRange(_) | Error::Stage(_) => 5,
            Error::Io(_) => 6,
        }
    }
}
