//! Error type shared across the crate.

/// Everything that can go wrong inside the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A NaN or infinity showed up in a value or gradient.
    #[error("non-finite values in {0}")]
    NonFinite(String),

    /// Invalid argument or configuration.
    #[error("{0}")]
    Invalid(String),

    /// A parameter was expected to carry a gradient but does not.
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),

    /// An operation required a frozen model.
    #[error("model {0} is not frozen")]
    NotFrozen(String),

    /// Malformed file contents (bad magic, checksum, truncation, ...).
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
