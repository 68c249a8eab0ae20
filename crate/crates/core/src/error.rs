use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: row {row}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("unknown technique name(s) for schema {schema}: {}", names.join(", "))]
    UnknownTechnique { schema: String, names: Vec<String> },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("encoder backend: {0}")]
    Backend(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("incompatible inputs: {0}")]
    Compatibility(String),

    #[error("non-finite gradient in parameter group `{group}`")]
    NonFiniteGradient { group: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (samples: {})", samples.join(", "))]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        samples: Vec<String>,
    },

    #[error("missing input files:\n  {}", .0.join("\n  "))]
    MissingFiles(Vec<String>),

    #[error("split `{0}` is empty")]
    EmptySplit(String),

    #[error("audio: {0}")]
    Audio(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
