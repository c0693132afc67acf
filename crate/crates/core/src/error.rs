use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("failed to decode audio {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("input too short: {0}")]
    InputTooShort(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("corrupt stream: {0}")]
    CorruptStream(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("model mismatch: stream codebook hash {stream:016x}, model {model:016x}")]
    ModelMismatch { stream: u64, model: u64 },

    #[error("encode error: {0}")]
    Encode(String),

    #[error("strategy error: {0}")]
    Strategy(String),

    #[error("semantic teacher unavailable: {0}")]
    TeacherUnavailable(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("path error: {0}")]
    Path(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
