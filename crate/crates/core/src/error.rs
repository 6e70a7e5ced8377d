//! Error type shared by every module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CowError {
    /// Tensor or mask dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A numeric contract was violated (NaN, Inf, undefined cosine, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// An operation that needs at least one pixel got an empty region.
    #[error("empty region: {0}")]
    EmptyRegion(String),
    /// A caller-supplied argument is out of range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A domain invariant does not hold.
    #[error("validation failed: {0}")]
    Validation(String),
    /// Bad configuration (unknown key, unparsable value, inconsistent folds).
    #[error("config error: {0}")]
    Config(String),
    /// Malformed serialized data.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },
    /// Container version not understood by this build.
    #[error("unsupported container version {0}")]
    Version(u8),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CowError>;

impl CowError {
    /// Process exit code for the CLI: 2 for configuration problems,
    /// 3 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CowError::Config(_) => 2,
            CowError::Numeric(_) => 3,
            _ => 1,
        }
    }
}
