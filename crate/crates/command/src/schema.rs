//! Schema and semantic validation of structured operations.

use std::sync::OnceLock;

use jsonschema::Validator;
use serde_json::Value;

use crate::error::ParseError;
use crate::op::StructuredOp;

pub const SCHEMA_JSON: &str = include_str!("../data/structured_op.schema.json");
pub const SCHEMA_VERSION: u32 = 1;

fn validator() -> &'static Validator {
    static V: OnceLock<Validator> = OnceLock::new();
    V.get_or_init(|| {
        let schema: Value = serde_json::from_str(SCHEMA_JSON).expect("schema json");
        jsonschema::validator_for(&schema).expect("schema compiles")
    })
}

pub fn schema_value() -> Value {
    serde_json::from_str(SCHEMA_JSON).expect("schema json")
}

/// Validate raw JSON and decode it into a checked [`StructuredOp`].
pub fn validate_value(value: &Value) -> Result<StructuredOp, ParseError> {
    let errors: Vec<String> = validator()
        .iter_errors(value)
        .map(|e| format!("{} at {}", e, e.instance_path()))
        .collect();
    if !errors.is_empty() {
        return Err(ParseError::Schema(errors.join("; ")));
    }
    let op: StructuredOp =
        serde_json::from_value(value.clone()).map_err(|e| ParseError::Schema(e.to_string()))?;
    check_semantics(&op)?;
    Ok(op)
}

/// Rules the schema alone cannot express.
pub fn check_semantics(op: &StructuredOp) -> Result<(), ParseError> {
    if op.op.category() != op.category {
        return Err(ParseError::Schema(format!(
            "op {} does not belong to category {:?}",
            op.op, op.category
        )));
    }
    if !(0.0..=1.0).contains(&op.confidence) {
        return Err(ParseError::Schema(format!("confidence {} outside [0, 1]", op.confidence)));
    }
    let allowed = op.op.allowed_slots();
    for kind in op.slots.present() {
        if !allowed.contains(&kind) {
            return Err(ParseError::Schema(format!(
                "slot {} not accepted by {}",
                kind.as_str(),
                op.op
            )));
        }
    }
    if op.slots.count == Some(0) {
        return Err(ParseError::Schema("count must be at least 1".into()));
    }
    if let Some([x0, y0, x1, y1]) = op.slots.bbox {
        if x0 > x1 || y0 > y1 {
            return Err(ParseError::Schema(format!("box [{x0}, {y0}, {x1}, {y1}] is inverted")));
        }
    }
    if matches!(&op.slots.points, Some(p) if p.is_empty()) {
        return Err(ParseError::Schema("points must not be empty".into()));
    }
    Ok(())
}
