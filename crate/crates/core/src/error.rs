use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("anchor has no positive partners")]
    NoPositives,

    #[error("anchor has no negative partners in the requested group")]
    EmptyNegatives,

    #[error("scene {0} has no appearance vectors but the visual module is enabled")]
    MissingAppearance(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),

    #[error("loss diverged at epoch {epoch}, step {step}")]
    DivergenceDetected { epoch: usize, step: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
