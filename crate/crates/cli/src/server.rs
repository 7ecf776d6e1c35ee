//! HTTP API consumed by the annotation front end.

use std::sync::Arc;

use advcomp_core::harness::{AnnotationStore, ImageKind};
use advcomp_core::scoring::AnnotationRecord;
use advcomp_core::Error;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            Error::DuplicateAnnotation { .. } => StatusCode::CONFLICT,
            Error::UnknownImage(_) => StatusCode::NOT_FOUND,
            Error::InvalidAnnotation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: String,
}

async fn next_task(
    State(store): State<Arc<AnnotationStore>>,
    Query(q): Query<NextQuery>,
) -> Response {
    if q.annotator.trim().is_empty() {
        return (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(json!({ "error": "annotator must not be empty" })),
        )
            .into_response();
    }
    Json(json!({ "task": store.next_task(&q.annotator) })).into_response()
}

async fn image(
    State(store): State<Arc<AnnotationStore>>,
    Path((id, kind)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let kind = match kind.as_str() {
        "clean" => ImageKind::Clean,
        "adv" => ImageKind::Adversarial,
        _ => return Ok(StatusCode::NOT_FOUND.into_response()),
    };
    let path = store.image_path(&id, kind)?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|_| Error::MissingFile(path.clone()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn submit(
    State(store): State<Arc<AnnotationStore>>,
    Json(record): Json<AnnotationRecord>,
) -> Result<Response, ApiError> {
    store.submit(record.clone())?;
    Ok((StatusCode::CREATED, Json(record)).into_response())
}

async fn progress(State(store): State<Arc<AnnotationStore>>) -> Response {
    Json(store.progress()).into_response()
}

async fn aggregate(State(store): State<Arc<AnnotationStore>>) -> Result<Response, ApiError> {
    Ok(Json(store.aggregate()?).into_response())
}

pub fn router(store: Arc<AnnotationStore>) -> Router {
    Router::new()
        .route("/tasks/next", get(next_task))
        .route("/images/{id}/{kind}", get(image))
        .route("/annotations", post(submit))
        .route("/progress", get(progress))
        .route("/aggregate", get(aggregate))
        .with_state(store)
}

pub async fn serve(store: Arc<AnnotationStore>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    eprintln!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store)).await
}
