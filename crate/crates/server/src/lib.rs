//! HTTP API over a loaded pipeline.

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use re3g_core::error::Error;
use re3g_core::service::{Pipeline, SessionStore, TurnOverrides};
use serde::{Deserialize, Serialize};
use serde_json::json;

pub struct AppState {
    pipeline: RwLock<Arc<Pipeline>>,
    pub sessions: SessionStore,
    pub run_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(pipeline: Pipeline, sessions: SessionStore, run_dir: Option<PathBuf>) -> Self {
        AppState {
            pipeline: RwLock::new(Arc::new(pipeline)),
            sessions,
            run_dir,
        }
    }

    /// The pipeline in use; turns already running keep the one they started with.
    pub fn pipeline(&self) -> Arc<Pipeline> {
        self.pipeline.read().expect("pipeline lock").clone()
    }

    /// Replaces the pipeline atomically for subsequent turns.
    pub fn swap_pipeline(&self, next: Pipeline) {
        *self.pipeline.write().expect("pipeline lock") = Arc::new(next);
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRequest {
    pub text: String,
    #[serde(default)]
    pub config: TurnOverrides,
}

#[derive(Debug, Serialize)]
struct Created {
    session_id: String,
}

pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownId(_) => StatusCode::NOT_FOUND,
            Error::InvalidInput(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/turns", post(post_turn))
        .route("/passages/{id}", get(get_passage))
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let p = state.pipeline();
    let artifacts = state
        .run_dir
        .as_deref()
        .map(re3g_core::service::ops::artifact_summary);
    Json(json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "snapshot_version": p.snapshot_version(),
        "passages": p.corpus().len(),
        "has_reranker": p.has_reranker(),
        "config": p.config(),
        "artifacts": artifacts,
    }))
}

async fn create_session(State(state): State<Arc<AppState>>) -> ApiResult<serde_json::Value> {
    let id = state.sessions.create()?;
    Ok(Json(serde_json::to_value(Created { session_id: id }).expect("plain struct")))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<serde_json::Value> {
    let s = state.sessions.snapshot(&id)?;
    Ok(Json(serde_json::to_value(s).map_err(Error::from)?))
}

async fn post_turn(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<TurnRequest>, JsonRejection>,
) -> ApiResult<serde_json::Value> {
    let Json(req) = body?;
    if req.text.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "text must not be empty"));
    }
    if state.sessions.get(&id).is_none() {
        return Err(Error::UnknownId(id).into());
    }
    let pipeline = state.pipeline();
    let st = state.clone();
    let record = tokio::task::spawn_blocking(move || st.sessions.turn(&pipeline, &id, &req.text, &req.config))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(serde_json::to_value(record).map_err(Error::from)?))
}

async fn get_passage(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<serde_json::Value> {
    let p = state.pipeline();
    let passage = p.corpus().passage(&id).ok_or(Error::UnknownId(id))?;
    Ok(Json(serde_json::to_value(passage).map_err(Error::from)?))
}
