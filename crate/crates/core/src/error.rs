use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("every token position is padding")]
    AllMasked,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("index {index} out of range for size {size}")]
    Index { index: usize, size: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("retrieval pool is empty for query {0}")]
    EmptyPool(usize),

    #[error("scene has no object to {0}")]
    EmptyScene(&'static str),

    #[error("scene grid is full, cannot add an object")]
    GridFull,

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("cannot parse instruction {text:?}: {reason}")]
    Parse { text: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error: {0}")]
    Image(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("gradient check failed: relative error {error:.3e} exceeds {tolerance:.1e} at {parameter}")]
    ToleranceExceeded {
        parameter: String,
        error: f64,
        tolerance: f64,
    },

    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
