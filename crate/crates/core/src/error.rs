//! Error types shared across the crate.

/// Distinguishes the failure modes of checkpoint bundles so callers can
/// react to each one (retry, re-create, refuse to resume).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointErrorKind {
    /// Bundle was written by an incompatible format version.
    VersionMismatch,
    /// A payload file is shorter than its header or manifest promises.
    Truncated,
    /// Tensor shape on disk disagrees with the manifest.
    ShapeMismatch,
    /// Checksum verification failed.
    Integrity,
    /// A file named by the manifest is missing.
    Missing,
    /// Manifest or payload cannot be parsed at all.
    Malformed,
}

impl std::fmt::Display for CheckpointErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::VersionMismatch => "version mismatch",
            Self::Truncated => "truncated payload",
            Self::ShapeMismatch => "shape mismatch",
            Self::Integrity => "integrity check failed",
            Self::Missing => "missing file",
            Self::Malformed => "malformed bundle",
        };
        f.write_str(s)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint {kind}: {msg}")]
    Checkpoint {
        kind: CheckpointErrorKind,
        msg: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serialization(String),
}

impl Error {
    pub fn checkpoint(kind: CheckpointErrorKind, msg: impl Into<String>) -> Self {
        Self::Checkpoint {
            kind,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
