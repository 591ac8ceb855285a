use serde::Serialize;
use spine_command::{OpName, ParseError, StateError};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{message}")]
    Rejected { message: String, remaining: usize },
    #[error("{0}")]
    State(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{0}")]
    Internal(String),
}

impl From<StateError> for ServiceError {
    fn from(e: StateError) -> Self {
        ServiceError::State(e.to_string())
    }
}

impl From<spine_core::CoreError> for ServiceError {
    fn from(e: spine_core::CoreError) -> Self {
        ServiceError::Internal(e.to_string())
    }
}

/// JSON error body.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorBody {
    pub code: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suggestion: Option<OpName>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<OpName>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remaining: Option<usize>,
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::NotFound(_) => 404,
            ServiceError::BadRequest(_) => 400,
            ServiceError::Invalid(_) => 422,
            ServiceError::Rejected { .. } | ServiceError::State(_) => 409,
            ServiceError::Parse(_) => 422,
            ServiceError::Internal(_) => 500,
        }
    }

    pub fn body(&self) -> ErrorBody {
        let code = match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::Invalid(_) => "invalid_request",
            ServiceError::Rejected { .. } => "rejected",
            ServiceError::State(_) => "state_error",
            ServiceError::Parse(_) => "parse_error",
            ServiceError::Internal(_) => "internal",
        };
        let (suggestion, candidates) = match self {
            ServiceError::Parse(ParseError::Unrecognized { suggestion, .. }) => (Some(*suggestion), None),
            ServiceError::Parse(ParseError::Ambiguous { candidates, .. }) => (None, Some(candidates.clone())),
            _ => (None, None),
        };
        let remaining = match self {
            ServiceError::Rejected { remaining, .. } => Some(*remaining),
            _ => None,
        };
        ErrorBody { code, message: self.to_string(), suggestion, candidates, remaining }
    }
}
