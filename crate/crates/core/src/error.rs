use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("loss must be a 1x1 matrix, got {0:?}")]
    NonScalarLoss((usize, usize)),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("interaction log is empty")]
    EmptyLog,

    #[error("k-core filtering with k={0} removed every interaction")]
    EmptyAfterFilter(usize),

    #[error("no admissible item left to sample for user {0}")]
    SamplingExhausted(usize),

    #[error("degenerate expert segment: parameter displacement {0:e} is below 1e-12")]
    DegenerateSegment(f64),

    #[error("condensation diverged at epoch {epoch}: {quantity} is not finite")]
    Diverged {
        epoch: usize,
        quantity: &'static str,
        last_good: Box<crate::condensed::CondensedGraph>,
    },

    #[error("condensed graph has no user-item edge at tau={tau}")]
    EmptyCondensed { tau: f64 },

    #[error("condensed graph links every user to every item at tau={tau}, leaving no negatives")]
    SaturatedCondensed { tau: f64 },

    #[error("config: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
