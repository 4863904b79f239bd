use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed audio file {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("audio contains no samples")]
    EmptyAudio,
    #[error("unsupported sample rate {0} Hz (minimum 4000)")]
    UnsupportedRate(u32),
    #[error("clip of {len} samples is shorter than one {window}-sample analysis window")]
    TooShort { len: usize, window: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("numerical error in {0}")]
    Numerical(String),
    #[error("unstable discretisation: spectral radius {0}")]
    Stability(f64),
    #[error("leakage: groups {0:?} appear in more than one split")]
    Leakage(Vec<String>),
    #[error("data error: {0}")]
    Data(String),
    #[error("naming error: {0}")]
    Naming(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("case studies failed: {0:?}")]
    CaseStudyFailure(Vec<String>),
    #[error("io error on {path}: {source}")]
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
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
