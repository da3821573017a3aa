//! Error type shared by every module of the engine.

use std::path::PathBuf;

/// Errors produced by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Calibration statistics cannot answer the request (e.g. empty reservoir).
    #[error("calibration error: {0}")]
    Calibration(String),

    /// Two calibration shards cannot be merged.
    #[error("merge error: {0}")]
    Merge(String),

    /// An argument lies outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A hook point that does not exist in the model.
    #[error("invalid hook point: {0}")]
    InvalidHook(String),

    /// An analysis was asked to run over no data.
    #[error("empty stream: {0}")]
    EmptyStream(String),

    /// Weight-container manifest could not be parsed or is inconsistent.
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    /// Two tensors in a weight container claim overlapping byte ranges.
    #[error("offset overlap: tensors `{first}` and `{second}` overlap")]
    OffsetOverlap { first: String, second: String },

    /// The blob is shorter than the manifest promises.
    #[error("truncated blob: need {needed} bytes, found {found}")]
    TruncatedBlob { needed: usize, found: usize },

    /// Loaded data contains NaN or infinite values.
    #[error("data error: {0}")]
    Data(String),

    /// A report failed schema validation.
    #[error("validation error: {0}")]
    Validation(String),

    /// A report carries a version string this build does not read.
    #[error("unsupported report version `{found}` (expected `{expected}`)")]
    UnsupportedVersion { found: String, expected: String },

    /// Invalid command-line or config-file input.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
