//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// An operation received tensors whose shapes cannot be combined.
    #[error("{op}: shape mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// `backward` was called on a tensor that is not a scalar.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// The optimizer was asked to step a parameter that has no gradient.
    #[error("parameter '{name}' has no gradient")]
    MissingGrad { name: String },

    /// A precondition on an argument failed.
    #[error("{0}")]
    InvalidArg(String),

    /// Configuration file or flag validation failed.
    #[error("config: {0}")]
    Config(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    // Container format errors. These are distinct variants so callers can
    // tell structural corruption apart from version or checksum problems.
    #[error("container: bad magic bytes")]
    BadMagic,
    #[error("container: unsupported format version {found}")]
    UnsupportedVersion { found: u32 },
    #[error("container: unsupported dtype code {code} in record '{name}'")]
    UnsupportedDtype { name: String, code: u32 },
    #[error("container: duplicate record name '{name}'")]
    DuplicateName { name: String },
    #[error("container: file truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("container: checksum mismatch in record '{name}'")]
    ChecksumMismatch { name: String },

    /// A checkpoint file is missing a record the architecture requires.
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }
}
