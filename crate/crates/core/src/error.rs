use std::io;

use thiserror::Error;

pub type Result<T, E = FnpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FnpError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("point ({lat}, {lon}) lies outside the grid domain")]
    OutOfDomain { lat: f64, lon: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("matrix is not symmetric positive-definite: {0}")]
    NotPositiveDefinite(String),

    #[error("bad magic number: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("file truncated while reading {section}")]
    Truncated { section: &'static str },

    #[error("inconsistent header: {0}")]
    BadHeader(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("unknown model variant {0:?}")]
    UnknownVariant(String),

    #[error("variant {variant} cannot be used here: {reason}")]
    IncompatibleVariant { variant: String, reason: String },

    #[error("duplicate experiment id {0:?}")]
    DuplicateExperiment(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding failed: {0}")]
    Image(String),
}

impl FnpError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            FnpError::Numeric(_) | FnpError::NonFinite(_) | FnpError::NotPositiveDefinite(_) => 3,
            _ => 2,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> FnpError {
    FnpError::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> FnpError {
    FnpError::ShapeMismatch(msg.into())
}
