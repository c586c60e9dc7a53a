use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{table}: missing header column `{column}`")]
    MissingColumn { table: &'static str, column: String },

    #[error("{table}: {count} malformed row(s), first at row {first_row}: {first_message}")]
    MalformedRows {
        table: &'static str,
        count: usize,
        first_row: usize,
        first_message: String,
    },

    #[error("empty cohort{0}")]
    EmptyCohort(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("both classes required: {0}")]
    SingleClass(String),

    #[error("variable `{0}` has no observed values in the training split")]
    NoObservations(String),

    #[error("empty history for patient {0}")]
    EmptyHistory(String),

    #[error("no labelable blood pressure in history of patient {0}")]
    NoLabelableHistory(String),

    #[error("training diverged at epoch {epoch}: validation loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("unsupported artifact version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_) => ErrorClass::Usage,
            Error::ShapeMismatch(_) | Error::NonFinite(_) | Error::Divergence { .. } => {
                ErrorClass::Numerical
            }
            _ => ErrorClass::Data,
        }
    }
}
