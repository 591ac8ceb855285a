use thiserror::Error;

use crate::op::OpName;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("empty command")]
    Empty,
    #[error("unrecognised command `{input}`; did you mean `{suggestion}` (\"{phrase}\")?")]
    Unrecognized {
        input: String,
        suggestion: OpName,
        phrase: String,
    },
    #[error("ambiguous command `{input}` matches {}", list(.candidates))]
    Ambiguous { input: String, candidates: Vec<OpName> },
    #[error("structured op failed validation: {0}")]
    Schema(String),
}

fn list(ops: &[OpName]) -> String {
    ops.iter().map(|o| o.as_str()).collect::<Vec<_>>().join(", ")
}

impl ParseError {
    pub fn suggestion(&self) -> Option<OpName> {
        match self {
            ParseError::Unrecognized { suggestion, .. } => Some(*suggestion),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("lexicon json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("lexicon: {0}")]
    Invalid(String),
}
