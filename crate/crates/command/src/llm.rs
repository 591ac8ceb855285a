//! Optional remote parser with grammar fallback.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::ParseError;
use crate::grammar::Grammar;
use crate::op::StructuredOp;
use crate::schema::{validate_value, SCHEMA_JSON, SCHEMA_VERSION};

pub const DEFAULT_SYSTEM_PROMPT: &str = "Translate the clinical command into exactly one JSON object that \
validates against the StructuredOp schema below. Reply with the JSON object only, no prose.\n{schema}";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmClientConfig {
    pub endpoint: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// `{schema}` is replaced by the published StructuredOp schema.
    #[serde(default = "default_prompt")]
    pub system_prompt: String,
    /// Extra attempts after a network failure, all within one timeout budget.
    #[serde(default)]
    pub retries: u32,
}

fn default_timeout_ms() -> u64 {
    2000
}

fn default_prompt() -> String {
    DEFAULT_SYSTEM_PROMPT.to_string()
}

impl LlmClientConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        LlmClientConfig {
            endpoint: endpoint.into(),
            timeout_ms: default_timeout_ms(),
            system_prompt: default_prompt(),
            retries: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackReason {
    Timeout,
    Network,
    InvalidJson,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LlmOutcome {
    pub op: StructuredOp,
    /// Set when the grammar answered instead of the endpoint.
    pub fallback: Option<FallbackReason>,
    pub warning: Option<String>,
}

#[derive(Serialize)]
struct Request<'a> {
    command: &'a str,
    schema_version: u32,
    system_prompt: String,
}

enum Failure {
    Timeout(String),
    Network(String),
}

/// Ask the endpoint first; timeouts, transport errors and non-JSON replies fall back to
/// the grammar, schema violations are errors.
pub fn parse_via_llm(
    text: &str,
    cfg: &LlmClientConfig,
    grammar: &Grammar,
) -> Result<LlmOutcome, ParseError> {
    if text.trim().is_empty() {
        return Err(ParseError::Empty);
    }
    let fallback = |reason: FallbackReason, warning: String| {
        grammar.parse(text).map(|op| LlmOutcome { op, fallback: Some(reason), warning: Some(warning) })
    };
    let body = match request_body(text, cfg) {
        Ok(b) => b,
        Err(e) => return fallback(FallbackReason::Network, e),
    };
    let reply = match post(cfg, body) {
        Ok(r) => r,
        Err(Failure::Timeout(w)) => return fallback(FallbackReason::Timeout, w),
        Err(Failure::Network(w)) => return fallback(FallbackReason::Network, w),
    };
    let value: Value = match serde_json::from_str(&reply) {
        Ok(v) => v,
        Err(e) => return fallback(FallbackReason::InvalidJson, format!("reply is not JSON: {e}")),
    };
    let op = validate_value(&value)?;
    Ok(LlmOutcome { op, fallback: None, warning: None })
}

fn request_body(text: &str, cfg: &LlmClientConfig) -> Result<String, String> {
    let req = Request {
        command: text,
        schema_version: SCHEMA_VERSION,
        system_prompt: cfg.system_prompt.replace("{schema}", SCHEMA_JSON),
    };
    serde_json::to_string(&req).map_err(|e| e.to_string())
}

fn post(cfg: &LlmClientConfig, body: String) -> Result<String, Failure> {
    let deadline = Instant::now() + Duration::from_millis(cfg.timeout_ms);
    let mut last = String::from("no attempt made");
    for attempt in 0..=cfg.retries {
        let remaining = deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            return Err(Failure::Timeout(format!("deadline of {} ms elapsed", cfg.timeout_ms)));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(remaining)
            .connect_timeout(remaining)
            .build()
            .map_err(|e| Failure::Network(e.to_string()))?;
        let result = client
            .post(&cfg.endpoint)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.clone())
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.text());
        match result {
            Ok(text) => return Ok(text),
            Err(e) if e.is_timeout() => {
                return Err(Failure::Timeout(format!("attempt {}: {e}", attempt + 1)));
            }
            Err(e) => last = format!("attempt {}: {e}", attempt + 1),
        }
    }
    Err(Failure::Network(last))
}
