use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node `{node}`: {detail}")]
    Shape { node: String, detail: String },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("backward called before forward")]
    NoForward,

    #[error("parameter has no gradient: {0}")]
    MissingGrad(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unsupported layer `{node}`: {detail}")]
    Unsupported { node: String, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset split: {0}")]
    EmptySplit(String),

    #[error("signal error: {0}")]
    Signal(String),

    #[error("data leakage: subject {0} is part of the model's training manifest")]
    Leakage(String),

    #[error("missing prerequisite artifact(s): {0}")]
    MissingArtifact(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
