use thiserror::Error;

/// Errors raised anywhere in the detector library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{source_name}:{line}: {reason}")]
    Parse {
        source_name: String,
        line: usize,
        reason: String,
    },

    #[error("malformed PGM at byte {offset}: {reason}")]
    Pgm { offset: usize, reason: String },

    #[error("malformed tensor record at byte {offset}: {reason}")]
    TensorFormat { offset: usize, reason: String },

    #[error("could not place object {index} of {requested} within the overlap budget after {attempts} attempts")]
    Placement {
        index: usize,
        requested: usize,
        attempts: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("internal check failed: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad input data or configuration, as opposed
    /// to violated internal invariants.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Shape(_) | Error::NonFinite(_) | Error::Invariant(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
