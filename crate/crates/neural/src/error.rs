use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch in `{op}` (node {node}): {detail}")]
    Shape {
        op: &'static str,
        node: usize,
        detail: String,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("graph state error: {0}")]
    State(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = NeuralError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, node: usize, detail: impl Into<String>) -> NeuralError {
    NeuralError::Shape {
        op,
        node,
        detail: detail.into(),
    }
}
