use std::io;

use thiserror::Error;

/// Errors produced anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("backward called with a trace that does not belong to this graph")]
    TraceMismatch,

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unsupported codec family: {0}")]
    UnsupportedFamily(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("infeasible privacy target: {0}")]
    Infeasible(String),

    #[error("partition failed: {0}")]
    Partition(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True when the error stems from caller input (bad config, bad
    /// arguments, unreadable or malformed files) rather than a failure
    /// inside a computation.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::InvalidArgument(_)
            | Error::Config(_)
            | Error::UnsupportedFamily(_)
            | Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::Truncated(_)
            | Error::Malformed(_)
            | Error::Infeasible(_) => true,
            Error::Io(e) => matches!(e.kind(), io::ErrorKind::NotFound | io::ErrorKind::PermissionDenied),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
