use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("capacity exceeded: {requested} classes requested but the classifier has {capacity} outputs")]
    CapacityExceeded { requested: usize, capacity: usize },

    #[error("missing argument: {0}")]
    MissingArgument(String),

    #[error("invalid label {label}: only {allocated} classes are allocated")]
    InvalidLabel { label: usize, allocated: usize },

    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: String,
        offset: u64,
        message: String,
    },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("cosine distance is undefined for a zero vector")]
    UndefinedDistance,

    #[error("update gain is undefined: re-indexed upper bound equals the old self-test")]
    UndefinedGain,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("digest mismatch for {path}: manifest records {expected}, file hashes to {actual}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("missing gallery for step {step}: {path}")]
    MissingGallery { step: usize, path: PathBuf },

    #[error("refusing to overwrite completed run at {0} (use force)")]
    AlreadyComplete(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::CapacityExceeded { .. } => "capacity_exceeded",
            Error::MissingArgument(_) => "missing_argument",
            Error::InvalidLabel { .. } => "invalid_label",
            Error::Format { .. } => "format",
            Error::Diverged { .. } => "diverged",
            Error::InsufficientData(_) => "insufficient_data",
            Error::UndefinedDistance => "undefined_distance",
            Error::UndefinedGain => "undefined_gain",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::DigestMismatch { .. } => "digest_mismatch",
            Error::MissingGallery { .. } => "missing_gallery",
            Error::AlreadyComplete(_) => "already_complete",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    /// Whether the error stems from malformed input or arguments rather than
    /// a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter(_)
                | Error::CapacityExceeded { .. }
                | Error::MissingArgument(_)
                | Error::InvalidLabel { .. }
                | Error::Format { .. }
                | Error::Json(_)
        )
    }
}
