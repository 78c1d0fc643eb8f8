use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} (node {node}) produced a non-finite value")]
    NonFinite { op: &'static str, node: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),

    #[error("codebook enumeration over 2^{d} codes exceeds the limit of 2^{max}; use the grouped path")]
    EnumerationTooLarge { d: usize, max: usize },

    #[error("bitstream: {0}")]
    Bitstream(String),

    #[error("image: {0}")]
    Image(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Short, stable tag used by the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::NonFinite { .. } | Error::NonFiniteInput(_) => "non-finite",
            Error::NotScalar(_) => "not-scalar",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::EnumerationTooLarge { .. } => "enumeration-too-large",
            Error::Bitstream(_) => "bitstream",
            Error::Image(_) => "image",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
        }
    }
}
