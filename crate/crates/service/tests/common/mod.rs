#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use spine_core::fixtures::PhantomConfig;
use spine_core::{ModelConfig, SegModel};
use spine_service::images::write_phantom_slices;
use spine_service::{api, Service, ServiceConfig};
use tower::ServiceExt;

pub const API_SCHEMA: &str = include_str!("../../schemas/api.schema.json");

/// Toy model over a temporary directory of phantom slices with ground truth.
pub fn service(cfg: ServiceConfig) -> (tempfile::TempDir, Arc<Service>) {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let model = SegModel::new(ModelConfig::toy(), 0).unwrap();
    let svc = Service::new(model, dir.path(), cfg);
    (dir, Arc::new(svc))
}

pub fn write_fixture(dir: &Path) {
    let cfg = PhantomConfig { count: 4, ..PhantomConfig::default() };
    write_phantom_slices(&cfg, dir).unwrap();
}

pub fn first_image() -> &'static str {
    "images/phantom_000.png"
}

pub fn validator(def: &str) -> jsonschema::Validator {
    let doc: Value = serde_json::from_str(API_SCHEMA).unwrap();
    let schema = serde_json::json!({ "$defs": doc["$defs"], "$ref": format!("#/$defs/{def}") });
    jsonschema::validator_for(&schema).unwrap()
}

pub fn assert_schema(def: &str, value: &Value) {
    let v = validator(def);
    let errors: Vec<String> = v.iter_errors(value).map(|e| format!("{e} at {}", e.instance_path())).collect();
    assert!(errors.is_empty(), "{def}: {}\n{}", errors.join("; "), serde_json::to_string_pretty(value).unwrap());
}

pub struct Reply {
    pub status: StatusCode,
    pub content_type: Option<String>,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.bytes)))
    }
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let content_type = resp.headers().get("content-type").map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, content_type, bytes }
}

pub fn router(svc: &Arc<Service>) -> Router {
    api::router(svc.clone())
}
