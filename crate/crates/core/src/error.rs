use std::path::PathBuf;

/// Errors produced by the anomaly segmentation framework.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("expected 3 channels, found {found} in {path}")]
    ChannelCount { path: PathBuf, found: u8 },

    #[error("tensor file: {0}")]
    TensorFile(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("no stored output for stem `{0}`")]
    NoStoredOutput(String),

    #[error("training diverged (loss is not finite) at step {step} with seed {seed}")]
    Diverged { seed: u64, step: usize },

    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },

    #[error("tensor backend: {0}")]
    Backend(#[from] candle_core::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
