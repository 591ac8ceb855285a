//! HTTP transport over [`Service`].

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use spine_core::{PointLabel, PromptBox};

use crate::error::ServiceError;
use crate::service::Service;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    #[serde(default)]
    pub image: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandRequest {
    pub text: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointRequest {
    pub x: usize,
    pub y: usize,
    #[serde(default)]
    pub label: Option<PointLabel>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRequest {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmptyRequest {}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(serde_json::json!({ "error": self.body() }))).into_response()
    }
}

/// Decode a JSON body; an empty body means `T::default()` when `allow_empty`.
fn body<T: DeserializeOwned + Default>(bytes: &Bytes, allow_empty: bool) -> Result<T, ServiceError> {
    if allow_empty && bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(bytes).map_err(|e| ServiceError::BadRequest(format!("malformed request body: {e}")))
}

fn required<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(bytes).map_err(|e| ServiceError::BadRequest(format!("malformed request body: {e}")))
}

async fn blocking<R, F>(svc: Arc<Service>, f: F) -> Result<R, ServiceError>
where
    R: Send + 'static,
    F: FnOnce(&Service) -> Result<R, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))?
}

fn ok<T: Serialize>(status: StatusCode, value: T) -> Response {
    (status, Json(value)).into_response()
}

async fn health(State(svc): State<Arc<Service>>) -> Response {
    ok(StatusCode::OK, svc.health())
}

async fn create(State(svc): State<Arc<Service>>, bytes: Bytes) -> Result<Response, ServiceError> {
    let req: CreateRequest = body(&bytes, true)?;
    let reply = blocking(svc, move |s| s.create_session(req.image.as_deref())).await?;
    Ok(ok(StatusCode::CREATED, reply))
}

async fn command(State(svc): State<Arc<Service>>, Path(id): Path<String>, bytes: Bytes) -> Result<Response, ServiceError> {
    let req: CommandRequest = required(&bytes)?;
    let reply = blocking(svc, move |s| s.execute_command(&id, &req.text)).await?;
    Ok(ok(StatusCode::OK, reply))
}

async fn points(State(svc): State<Arc<Service>>, Path(id): Path<String>, bytes: Bytes) -> Result<Response, ServiceError> {
    let req: PointRequest = required(&bytes)?;
    let reply = blocking(svc, move |s| s.add_point(&id, req.x, req.y, req.label)).await?;
    Ok(ok(StatusCode::OK, reply))
}

async fn set_box(State(svc): State<Arc<Service>>, Path(id): Path<String>, bytes: Bytes) -> Result<Response, ServiceError> {
    let r: BoxRequest = required(&bytes)?;
    let bbox = PromptBox { x_min: r.x_min, y_min: r.y_min, x_max: r.x_max, y_max: r.y_max };
    let reply = blocking(svc, move |s| s.set_box(&id, bbox)).await?;
    Ok(ok(StatusCode::OK, reply))
}

async fn segment(State(svc): State<Arc<Service>>, Path(id): Path<String>, bytes: Bytes) -> Result<Response, ServiceError> {
    let _: EmptyRequest = body(&bytes, true)?;
    let reply = blocking(svc, move |s| s.segment(&id)).await?;
    Ok(ok(StatusCode::OK, reply))
}

async fn undo(State(svc): State<Arc<Service>>, Path(id): Path<String>, bytes: Bytes) -> Result<Response, ServiceError> {
    let _: EmptyRequest = body(&bytes, true)?;
    let reply = blocking(svc, move |s| s.undo(&id)).await?;
    Ok(ok(StatusCode::OK, reply))
}

async fn state(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let reply = blocking(svc, move |s| s.state(&id)).await?;
    Ok(ok(StatusCode::OK, reply))
}

async fn mask_png(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let png = blocking(svc, move |s| s.mask_png(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn fallback() -> ServiceError {
    ServiceError::NotFound("no such endpoint".into())
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/sessions", post(create))
        .route("/sessions/{id}/command", post(command))
        .route("/sessions/{id}/points", post(points))
        .route("/sessions/{id}/box", post(set_box))
        .route("/sessions/{id}/segment", post(segment))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/state", get(state))
        .route("/sessions/{id}/mask.png", get(mask_png))
        .fallback(fallback)
        .with_state(svc)
}

/// Serve until the process is interrupted.
pub async fn serve(svc: Arc<Service>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
