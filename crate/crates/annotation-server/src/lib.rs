//! JSON API over an [`AnnotationStore`].
//!
//! | route | answer |
//! |---|---|
//! | `GET /api/tasks/next?annotator=ID` | 200 task payload, 204 when done, 404 unknown annotator |
//! | `POST /api/judgments` | 201 receipt, 409 already judged, 404 unknown task or annotator |
//! | `GET /api/export` | 200 every judgment in submission order |
//! | `GET /api/tasks/{id}/image` | 200 image bytes |
//!
//! Anything else falls through to the static UI bundle when one is configured.

use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use stl_core::annotation::{AnnotationError, AnnotationStore, JudgmentReceipt, Side};

pub struct AppState {
    pub store: AnnotationStore,
    /// Directory the tasks' image references are relative to.
    pub image_root: PathBuf,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        let status = match e {
            AnnotationError::UnknownAnnotator(_) | AnnotationError::UnknownTask(_) => StatusCode::NOT_FOUND,
            AnnotationError::Conflict { .. } => StatusCode::CONFLICT,
            AnnotationError::Log { .. } => {
                log::error!("{e}");
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        ApiError(status, e.to_string())
    }
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: String,
}

async fn next_task(State(app): State<Arc<AppState>>, Query(q): Query<NextQuery>) -> Result<Response, ApiError> {
    Ok(match app.store.next_task(&q.annotator)? {
        Some(payload) => Json(payload).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

#[derive(Deserialize)]
struct Submission {
    task_id: String,
    annotator_id: String,
    choice: Side,
}

async fn submit(State(app): State<Arc<AppState>>, Json(s): Json<Submission>) -> Result<Response, ApiError> {
    let j = app.store.submit(&s.task_id, &s.annotator_id, s.choice)?;
    Ok((StatusCode::CREATED, Json(JudgmentReceipt::from(&j))).into_response())
}

async fn export(State(app): State<Arc<AppState>>) -> Response {
    Json(app.store.export()).into_response()
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

async fn image(State(app): State<Arc<AppState>>, UrlPath(task_id): UrlPath<String>) -> Result<Response, ApiError> {
    let task = app
        .store
        .task(&task_id)
        .ok_or_else(|| ApiError::from(AnnotationError::UnknownTask(task_id.clone())))?;
    let rel = Path::new(&task.image_ref);
    if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(ApiError(StatusCode::FORBIDDEN, "image reference leaves the image root".into()));
    }
    let path = app.image_root.join(rel);
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError(StatusCode::NOT_FOUND, format!("{}: {e}", task.image_ref)))?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}

pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{id}/image", get(image))
        .route("/api/judgments", post(submit))
        .route("/api/export", get(export))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until the process is stopped.
pub async fn serve(router: Router, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation server listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router).await
}
