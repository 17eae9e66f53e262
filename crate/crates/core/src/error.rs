use std::path::PathBuf;

use crate::models::ParamVec;

/// Errors signalled by the engine.
///
/// Contract violations on dimensions (mismatched vector lengths between a
/// model, a feature and a parameter) are programming errors and panic.
/// Everything a caller can reasonably recover from is reported here.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("size mismatch: expected {expected}, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("information matrix is singular")]
    SingularInformation,

    #[error("all pool Hessians vanish; no informative design exists")]
    DegenerateDesign,

    #[error("no sample size up to the cap of {cap} meets the target excess risk")]
    BudgetExhausted { cap: usize },

    #[error("non-finite loss or gradient at iterate {iterate:?}")]
    NumericalDivergence { iterate: ParamVec },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
