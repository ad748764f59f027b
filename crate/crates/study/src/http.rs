//! JSON-over-HTTP API for the study store.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;

use crate::model::{NextPair, Side, StudyManifest, StudyResults};
use crate::store::Store;
use crate::StudyError;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub image_dir: PathBuf,
}

impl IntoResponse for StudyError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self {
            StudyError::InvalidManifest(_) => (StatusCode::BAD_REQUEST, "invalid_manifest"),
            StudyError::InvalidRequest(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            StudyError::UnknownStudy(_) => (StatusCode::NOT_FOUND, "unknown_study"),
            StudyError::UnknownPair(_) => (StatusCode::NOT_FOUND, "unknown_pair"),
            StudyError::UnknownImage(_) => (StatusCode::NOT_FOUND, "unknown_image"),
            StudyError::Conflict { .. } => (StatusCode::CONFLICT, "conflict"),
            StudyError::CorruptLog { .. } | StudyError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        (status, Json(json!({ "error": kind, "message": self.to_string() }))).into_response()
    }
}

fn bad_json(e: impl std::fmt::Display) -> StudyError {
    StudyError::InvalidRequest(e.to_string())
}

#[derive(Serialize)]
struct Created {
    study_id: String,
    created: bool,
    pairs: usize,
}

async fn create_study(State(app): State<AppState>, body: Result<Json<StudyManifest>, JsonRejection>) -> Result<Response, StudyError> {
    let Json(manifest) = body.map_err(|e| StudyError::InvalidManifest(e.body_text()))?;
    let pairs = manifest.pairs.len();
    let (study_id, created) = app.store.create_study(manifest)?;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(Created { study_id, created, pairs })).into_response())
}

#[derive(Deserialize)]
struct NextQuery {
    participant: String,
}

async fn next_pair(
    State(app): State<AppState>,
    UrlPath(study_id): UrlPath<String>,
    query: Result<Query<NextQuery>, QueryRejection>,
) -> Result<Json<NextPair>, StudyError> {
    let Query(q) = query.map_err(|e| bad_json(e.body_text()))?;
    Ok(Json(app.store.next_pair(&study_id, &q.participant)?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ChoiceBody {
    participant_id: String,
    pair_id: String,
    choice: Side,
}

#[derive(Serialize)]
struct Ack {
    recorded: bool,
    pair_id: String,
    choice: Side,
    completed: usize,
    total: usize,
}

async fn record_choice(
    State(app): State<AppState>,
    UrlPath(study_id): UrlPath<String>,
    body: Result<Json<ChoiceBody>, JsonRejection>,
) -> Result<Json<Ack>, StudyError> {
    let Json(b) = body.map_err(|e| bad_json(e.body_text()))?;
    let record = app.store.record_choice(&study_id, &b.participant_id, &b.pair_id, b.choice)?;
    let (completed, total) = app.store.completed(&study_id, &b.participant_id)?;
    Ok(Json(Ack { recorded: true, pair_id: record.pair_id, choice: record.choice, completed, total }))
}

async fn results(State(app): State<AppState>, UrlPath(study_id): UrlPath<String>) -> Result<Json<StudyResults>, StudyError> {
    Ok(Json(app.store.results(&study_id)?))
}

/// Image ids name files directly inside the image directory; anything that
/// could step outside it is refused.
fn safe_image_id(id: &str) -> bool {
    !id.is_empty() && id != "." && id != ".." && !id.starts_with('.') && !id.contains(['/', '\\', '\0'])
}

const EXTENSIONS: &[(&str, &str)] = &[
    ("png", "image/png"),
    ("jpg", "image/jpeg"),
    ("jpeg", "image/jpeg"),
    ("webp", "image/webp"),
    ("gif", "image/gif"),
];

fn content_type(path: &Path) -> &'static str {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    EXTENSIONS
        .iter()
        .find(|(e, _)| Some(*e) == ext.as_deref())
        .map_or("application/octet-stream", |(_, t)| t)
}

async fn image(State(app): State<AppState>, UrlPath(image_id): UrlPath<String>) -> Result<Response, StudyError> {
    if !safe_image_id(&image_id) {
        return Err(StudyError::UnknownImage(image_id));
    }
    let mut candidates = vec![app.image_dir.join(&image_id)];
    candidates.extend(EXTENSIONS.iter().map(|(e, _)| app.image_dir.join(format!("{image_id}.{e}"))));
    for path in candidates {
        if tokio::fs::metadata(&path).await.is_ok_and(|m| m.is_file()) {
            let bytes = tokio::fs::read(&path).await?;
            return Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response());
        }
    }
    Err(StudyError::UnknownImage(image_id))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/studies", post(create_study))
        .route("/studies/{id}/next", get(next_pair))
        .route("/studies/{id}/choices", post(record_choice))
        .route("/studies/{id}/results", get(results))
        .route("/images/{image_id}", get(image))
        .with_state(state)
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    pub data_dir: PathBuf,
    pub image_dir: PathBuf,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            data_dir: PathBuf::from("study-data"),
            image_dir: PathBuf::from("images"),
        }
    }
}

/// A bound, not yet running server.
pub struct Server {
    listener: TcpListener,
    state: AppState,
}

impl Server {
    pub async fn bind(config: &ServerConfig) -> Result<Self, StudyError> {
        let store = Store::open(&config.data_dir)?;
        let listener = TcpListener::bind((config.host.as_str(), config.port)).await?;
        Ok(Self { listener, state: AppState { store: Arc::new(store), image_dir: config.image_dir.clone() } })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, StudyError> {
        Ok(self.listener.local_addr()?)
    }

    /// Serves until `shutdown` resolves.
    pub async fn run(self, shutdown: impl std::future::Future<Output = ()> + Send + 'static) -> Result<(), StudyError> {
        axum::serve(self.listener, router(self.state)).with_graceful_shutdown(shutdown).await?;
        Ok(())
    }
}
