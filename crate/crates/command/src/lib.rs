//! Natural-language command protocol: grammar parser, schema checks, action compiler and
//! an optional remote parser.

pub mod compile;
pub mod error;
pub mod grammar;
pub mod latency;
pub mod llm;
pub mod op;
pub mod schema;

pub use compile::{compile_to_actions, Action, PointLabel, SessionView, StateError};
pub use error::{LexiconError, ParseError};
pub use grammar::{normalize, parse_command, Grammar};
pub use latency::{measure_parse_latency, LatencyReport};
pub use llm::{parse_via_llm, FallbackReason, LlmClientConfig, LlmOutcome};
pub use op::{Category, OpName, OpSource, SlotKind, Slots, StructuredOp, WindowPreset};
pub use schema::{check_semantics, validate_value, SCHEMA_JSON, SCHEMA_VERSION};

/// Fixture corpora bundled with the crate.
pub mod corpus {
    use serde::Deserialize;

    use crate::op::{OpName, Slots};

    pub const CANONICAL_JSON: &str = include_str!("../data/canonical.json");
    pub const PARAPHRASE_JSON: &str = include_str!("../data/paraphrase.json");

    #[derive(Clone, Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Case {
        pub text: String,
        pub op: OpName,
        #[serde(default)]
        pub slots: Slots,
    }

    pub fn canonical() -> Vec<Case> {
        serde_json::from_str(CANONICAL_JSON).expect("canonical corpus")
    }

    pub fn paraphrase() -> Vec<Case> {
        serde_json::from_str(PARAPHRASE_JSON).expect("paraphrase corpus")
    }
}
