use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScaptError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by op `{0}`")]
    NonFinite(&'static str),
    #[error("degenerate batch: no anchor has an in-batch positive")]
    DegenerateBatch,
    #[error("checkpoint incompatible: {0}")]
    CheckpointMismatch(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error at {path}:{line}: {msg}")]
    Data {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("training aborted: {0}")]
    TrainingAborted(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ScaptError>;
