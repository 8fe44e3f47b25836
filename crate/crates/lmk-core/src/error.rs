use thiserror::Error;

/// Errors across the library: contract violations, data-format faults, and
/// numeric failures. The CLI maps these onto exit codes (config 2, data 3,
/// numeric 4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    Truncation { expected: u64, actual: u64 },

    #[error("placement failed after {tries} attempts")]
    PlacementFailed { tries: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI uses for this error kind.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => 2,
            Error::MagicMismatch { .. }
            | Error::UnsupportedVersion(_)
            | Error::Truncation { .. }
            | Error::PlacementFailed { .. }
            | Error::Io(_) => 3,
            Error::NonFinite(_) | Error::Numeric(_) => 4,
        }
    }
}
