use std::path::Path;
use std::sync::Arc;

use annserve_core::api::{FieldError, SearchRequest, SearchResponse};
use annserve_core::engine::{Engine, EngineInfo};
use annserve_core::rerank::CacheStats;
use annserve_core::Error;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::services::ServeDir;

use crate::config::ServeConfig;
use crate::stats::{Stats, StatsSnapshot};
use crate::votes::{QueryRegistry, VoteAck, VoteLog, VoteRequest};

/// Seconds a rejected client is asked to wait.
const RETRY_AFTER_S: u32 = 1;

pub(crate) struct AppState {
    engine: Arc<Engine>,
    pub(crate) votes: VoteLog,
    registry: QueryRegistry,
    stats: Stats,
    admission: Arc<Semaphore>,
    workers: Arc<Semaphore>,
}

impl AppState {
    pub(crate) fn new(engine: Engine, votes: VoteLog, config: &ServeConfig) -> Self {
        Self {
            engine: Arc::new(engine),
            votes,
            registry: QueryRegistry::new(config.query_registry),
            stats: Stats::new(),
            admission: Arc::new(Semaphore::new(config.max_concurrent + config.max_queued)),
            workers: Arc::new(Semaphore::new(config.max_concurrent)),
        }
    }
}

/// Body of every non-2xx JSON response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheSummary {
    #[serde(flatten)]
    pub stats: CacheStats,
    pub hit_rate: f64,
}

/// `GET /v1/stats`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsResponse {
    #[serde(flatten)]
    pub engine: EngineInfo,
    pub cache: CacheSummary,
    #[serde(flatten)]
    pub service: StatsSnapshot,
    pub vote_records: usize,
}

struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.into(),
                message: message.into(),
                fields: Vec::new(),
            },
        }
    }

    fn field(field: &str, message: impl Into<String>) -> Self {
        let message = message.into();
        let mut e = Self::new(StatusCode::BAD_REQUEST, "invalid_request", format!("{field}: {message}"));
        e.body.fields.push(FieldError {
            field: field.into(),
            message,
        });
        e
    }

    fn malformed(e: serde_json::Error) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "malformed_body", e.to_string())
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e {
            Error::InvalidRequest(fields) => Self {
                status: StatusCode::BAD_REQUEST,
                body: ErrorBody {
                    error: "invalid_request".into(),
                    message,
                    fields,
                },
            },
            Error::ModeUnavailable(_) => {
                let mut e = Self::field("mode", message);
                e.body.error = "mode_unavailable".into();
                e
            }
            Error::ZeroVector { .. } => Self::field("query", message),
            Error::RemoteEncoder { .. } => Self::new(StatusCode::SERVICE_UNAVAILABLE, "encoder_unavailable", message),
            _ => Self::internal(message),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status == StatusCode::TOO_MANY_REQUESTS {
            let retry = [(header::RETRY_AFTER, RETRY_AFTER_S.to_string())];
            return (self.status, retry, Json(self.body)).into_response();
        }
        (self.status, Json(self.body)).into_response()
    }
}

pub(crate) fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/v1/search", post(search))
        .route("/v1/vote", post(vote))
        .route("/v1/stats", get(stats))
        .route("/healthz", get(healthz))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.nest_service("/ui", ServeDir::new(dir)),
        None => api
            .route("/ui", get(no_ui))
            .route("/ui/{*rest}", get(no_ui)),
    }
}

async fn no_ui() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no ui bundle configured")
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ready" }))
}

async fn search(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<SearchResponse>, ApiError> {
    let request: SearchRequest = serde_json::from_slice(&body).map_err(ApiError::malformed)?;
    let Ok(_admitted) = state.admission.clone().try_acquire_owned() else {
        state.stats.record_rejected();
        return Err(ApiError::new(
            StatusCode::TOO_MANY_REQUESTS,
            "overloaded",
            "search queue is full, retry shortly",
        ));
    };
    let _worker = state
        .workers
        .clone()
        .acquire_owned()
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let engine = state.engine.clone();
    let result = tokio::task::spawn_blocking(move || engine.search(&request))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
    match result {
        Ok(response) => {
            state.registry.insert(response.query_id.clone());
            let p = &response.params;
            state.stats.record_query(&response.timings, p.exact, p.diverse, response.degraded);
            Ok(Json(response))
        }
        Err(e) => {
            let e = ApiError::from(e);
            if e.status.is_server_error() {
                state.stats.record_error();
            }
            Err(e)
        }
    }
}

async fn vote(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<VoteAck>, ApiError> {
    let vote: VoteRequest = serde_json::from_slice(&body).map_err(ApiError::malformed)?;
    if vote.query_id.trim().is_empty() {
        return Err(ApiError::field("query_id", "must not be empty"));
    }
    let size = state.engine.store().len();
    if vote.chunk_id >= size {
        return Err(ApiError::field(
            "chunk_id",
            format!("must be < corpus size {size}, got {}", vote.chunk_id),
        ));
    }
    let known = state.registry.contains(&vote.query_id);
    let st = state.clone();
    let ack = tokio::task::spawn_blocking(move || st.votes.append(vote, known))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| {
            state.stats.record_error();
            ApiError::internal(format!("vote log: {e}"))
        })?;
    if ack.recorded {
        state.stats.record_vote();
    }
    Ok(Json(ack))
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<StatsResponse> {
    let cache = state.engine.cache_stats();
    Json(StatsResponse {
        engine: state.engine.info(),
        cache: CacheSummary {
            stats: cache,
            hit_rate: cache.hit_rate(),
        },
        service: state.stats.snapshot(),
        vote_records: state.votes.len(),
    })
}
