use std::path::PathBuf;

/// Errors produced by the bridgesynth pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("payload size mismatch in {path}: header implies {expected} bytes, file has {actual}")]
    PayloadSize {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("model error: {0}")]
    Model(#[from] candle_core::Error),

    #[error("invalid model spec: {0}")]
    ModelSpec(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("sampling aborted: {0}")]
    Sampling(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
