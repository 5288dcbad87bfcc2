use crate::config::ConfigError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite loss at step {step}: {terms}")]
    NonFinite { step: u64, terms: String },
    #[error("image {path}: {reason}")]
    Image { path: String, reason: String },
    #[error("landmark file row {row}: {reason}")]
    Landmarks { row: usize, reason: String },
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: String, reason: String },
    #[error("checkpoint config hash {found} does not match the current config ({expected})")]
    ConfigMismatch { expected: String, found: String },
    #[error(transparent)]
    Params(#[from] igc_tensor::ParamError),
    #[error("evaluation: {0}")]
    Evaluation(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Stable machine-readable kind, used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::InvalidInput(_) => "invalid_input",
            Error::NonFinite { .. } => "non_finite",
            Error::Image { .. } => "image",
            Error::Landmarks { .. } => "landmarks",
            Error::CorruptCheckpoint { .. } => "corrupt_checkpoint",
            Error::ConfigMismatch { .. } => "config_mismatch",
            Error::Params(_) => "params",
            Error::Evaluation(_) => "evaluation",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
