//! HTTP wire API for the review loop.
//!
//! Reads share a read lock on the session; verdict appends and recomputes
//! take the write lock, so the log has a single appender at any time.

use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::json;
use tower_http::services::ServeDir;

use renovate_core::pipeline::{QueueItem, ReviewSession, VerdictSubmission};
use renovate_core::Error;

pub type SharedSession = Arc<RwLock<ReviewSession>>;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: String,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            status,
            kind: kind.into(),
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownImage(_) => StatusCode::NOT_FOUND,
            Error::OutOfVocabulary(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::InvalidConfig(_) | Error::Parse { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.kind(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({ "error": self.kind, "message": self.message })),
        )
            .into_response()
    }
}

fn poisoned() -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "session lock poisoned")
}

#[derive(Debug, Serialize)]
struct QueueBody {
    total: usize,
    items: Vec<QueueItem>,
}

async fn queue(State(session): State<SharedSession>) -> Result<Json<QueueBody>, ApiError> {
    let items = session.read().map_err(|_| poisoned())?.queue();
    Ok(Json(QueueBody {
        total: items.len(),
        items,
    }))
}

async fn item(State(session): State<SharedSession>, Path(image_id): Path<String>) -> Result<Response, ApiError> {
    let view = session.read().map_err(|_| poisoned())?.item(&image_id)?;
    Ok(Json(view).into_response())
}

async fn verdict(
    State(session): State<SharedSession>,
    body: Result<Json<VerdictSubmission>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(submission) =
        body.map_err(|r| ApiError::new(StatusCode::BAD_REQUEST, "malformed_request", r.body_text()))?;
    let record = session.write().map_err(|_| poisoned())?.submit(submission)?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn recompute(State(session): State<SharedSession>) -> Result<Response, ApiError> {
    let summary = session.write().map_err(|_| poisoned())?.recompute()?;
    Ok(Json(summary).into_response())
}

async fn report(State(session): State<SharedSession>) -> Result<Response, ApiError> {
    let view = session.read().map_err(|_| poisoned())?.report();
    Ok(Json(view).into_response())
}

async fn vocabulary(State(session): State<SharedSession>) -> Result<Response, ApiError> {
    let guard = session.read().map_err(|_| poisoned())?;
    let vocab = guard.vocabulary();
    Ok(Json(json!({ "dataset_id": vocab.dataset_id(), "labels": vocab.labels() })).into_response())
}

fn content_type(path: &std::path::Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

async fn image(State(session): State<SharedSession>, Path(image_id): Path<String>) -> Result<Response, ApiError> {
    let path = session.read().map_err(|_| poisoned())?.image_path(&image_id);
    let path = path.ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "image_not_found",
            format!("no image file for {image_id}"),
        )
    })?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}

async fn index() -> Json<serde_json::Value> {
    Json(json!({
        "endpoints": ["/queue", "/item/{image_id}", "/verdict", "/recompute", "/report", "/vocabulary", "/images/{image_id}"]
    }))
}

/// The review API. Static UI assets are served from the session's
/// `ui_dir` when configured; otherwise `/` lists the endpoints.
pub fn router(session: SharedSession) -> Router {
    let ui_dir = session.read().ok().and_then(|s| s.config().ui_dir.clone());
    let api = Router::new()
        .route("/queue", get(queue))
        .route("/item/{image_id}", get(item))
        .route("/verdict", post(verdict))
        .route("/recompute", post(recompute))
        .route("/report", get(report))
        .route("/vocabulary", get(vocabulary))
        .route("/images/{image_id}", get(image))
        .with_state(session);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api.route("/", get(index)),
    }
}

pub fn shared(session: ReviewSession) -> SharedSession {
    Arc::new(RwLock::new(session))
}
