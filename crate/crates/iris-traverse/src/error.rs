//! Crate-wide error type.

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for an operation.
    #[error("{op}: shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An input violates an operation's numeric domain (log of non-positive,
    /// division by zero, ...).
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },

    /// Two tensors from different computation contexts were combined.
    #[error("{0}: tensors belong to different computation contexts")]
    ContextMismatch(&'static str),

    /// `backward` was called on a tensor that is not a scalar.
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    /// A gradient-checked function returned different values across calls.
    #[error("gradient check requires a deterministic function: repeated forward passes disagreed")]
    NonDeterministicFunction,

    /// A segmentation mask carries too little mass to estimate geometry from.
    #[error("degenerate segmentation: {msg}")]
    DegenerateMask { msg: String },

    /// A latent code does not match what the decoder expects.
    #[error("latent mismatch: {0}")]
    LatentMismatch(String),

    /// An optimizer or traversal update became non-finite.
    #[error("diverged at iteration {iter}: {msg}")]
    Diverged { iter: usize, msg: String },

    /// Invalid configuration or plan value.
    #[error("config error: {0}")]
    Config(String),

    /// A serialized file (PGM, weights, iris code) failed to parse.
    #[error("{format} format error: {msg}")]
    FileFormat { format: &'static str, msg: String },

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn format(format: &'static str, msg: impl Into<String>) -> Self {
        Error::FileFormat {
            format,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
