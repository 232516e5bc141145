use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("unknown organ `{0}`")]
    UnknownOrgan(String),

    #[error("extractor fingerprint mismatch: bank was fit with {expected}, scoring with {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("target {target:.3} dB unreachable for {kind}: achievable range is [{lowest:.3} dB, +inf)")]
    Unreachable {
        kind: String,
        target: f64,
        lowest: f64,
    },

    #[error("PSNR not monotone along the {kind} sweep at theta={theta}: {detail}")]
    NonMonotone {
        kind: String,
        theta: f64,
        detail: String,
    },

    #[error("unsupported format version `{0}`")]
    UnsupportedVersion(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("corrupt model: {0}")]
    CorruptModel(String),

    #[error("schema violation in {source_name} row {row}: {detail}")]
    Schema {
        source_name: String,
        row: usize,
        detail: String,
    },

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    Image { path: PathBuf, detail: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
