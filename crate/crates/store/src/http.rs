//! REST front end for [`BlobStore`].
//!
//! | method | path                                   | result                         |
//! |--------|----------------------------------------|--------------------------------|
//! | POST   | `/v1/containers` `{"name": ..}`        | 201, 400, 409                  |
//! | GET    | `/v1/containers`                       | 200 `["batch", ..]`            |
//! | PUT    | `/v1/containers/{c}/blobs/{path}`      | 201 `{container,path,size,version}` |
//! | GET    | `/v1/containers/{c}/blobs/{path}`      | 200 raw body                   |
//! | DELETE | `/v1/containers/{c}/blobs/{path}`      | 204                            |
//! | GET    | `/v1/containers/{c}/blobs?prefix=p`    | 200 `[{path,size,created_at,..}]` |
//! | GET    | `/v1/stats`                            | request concurrency counters   |
//!
//! In test mode every request is delayed by the configured latency, or by the
//! `X-Simulated-Latency-Ms` request header when present.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::store::{BlobStore, StoreError};

pub const LATENCY_HEADER: &str = "x-simulated-latency-ms";

#[derive(Debug, Clone, Default)]
pub struct StoreHttpConfig {
    /// Enables latency injection.
    pub test_mode: bool,
    /// Per-request delay applied in test mode when the request names none.
    pub latency: Duration,
}

/// Live request counters, used by the ingestion benchmark to check
/// client-side concurrency limits.
#[derive(Debug, Default)]
pub struct RequestStats {
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    requests: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub in_flight: usize,
    pub max_in_flight: usize,
    pub requests: u64,
}

impl RequestStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            in_flight: self.in_flight.load(Ordering::SeqCst),
            max_in_flight: self.max_in_flight.load(Ordering::SeqCst),
            requests: self.requests.load(Ordering::SeqCst),
        }
    }

    pub fn reset(&self) {
        self.max_in_flight
            .store(self.in_flight.load(Ordering::SeqCst), Ordering::SeqCst);
        self.requests.store(0, Ordering::SeqCst);
    }
}

#[derive(Clone)]
struct AppState {
    store: Arc<BlobStore>,
    cfg: StoreHttpConfig,
    stats: Arc<RequestStats>,
}

pub struct ApiError(StoreError);

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            StoreError::UnknownContainer(_) | StoreError::NotFound { .. } => StatusCode::NOT_FOUND,
            StoreError::InvalidPath(_) | StoreError::InvalidName(_) => StatusCode::BAD_REQUEST,
            StoreError::AlreadyExists(_) => StatusCode::CONFLICT,
            StoreError::TooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            StoreError::StorageFailure(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = serde_json::json!({"error": self.0.code(), "message": self.0.to_string()});
        (status, Json(body)).into_response()
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, StoreError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StoreError::StorageFailure(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

pub fn router(store: Arc<BlobStore>, cfg: StoreHttpConfig, stats: Arc<RequestStats>) -> Router {
    let limit = store.config().max_blob_bytes as usize;
    let state = AppState { store, cfg, stats };
    let api = Router::new()
        .route("/v1/containers", post(create_container).get(list_containers))
        .route("/v1/containers/{container}/blobs", get(list_blobs))
        .route(
            "/v1/containers/{container}/blobs/{*path}",
            get(get_blob).put(put_blob).delete(delete_blob),
        )
        .layer(DefaultBodyLimit::max(limit))
        .layer(middleware::from_fn_with_state(state.clone(), instrument));
    Router::new()
        .route("/v1/stats", get(get_stats).delete(reset_stats))
        .merge(api)
        .with_state(state)
}

async fn instrument(State(st): State<AppState>, req: Request, next: Next) -> Response {
    let now = st.stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    st.stats.max_in_flight.fetch_max(now, Ordering::SeqCst);
    st.stats.requests.fetch_add(1, Ordering::SeqCst);
    if st.cfg.test_mode {
        let delay = req
            .headers()
            .get(LATENCY_HEADER)
            .and_then(|v| v.to_str().ok()?.parse::<u64>().ok())
            .map(Duration::from_millis)
            .unwrap_or(st.cfg.latency);
        if !delay.is_zero() {
            tokio::time::sleep(delay).await;
        }
    }
    let resp = next.run(req).await;
    st.stats.in_flight.fetch_sub(1, Ordering::SeqCst);
    resp
}

async fn get_stats(State(st): State<AppState>) -> Json<StatsSnapshot> {
    Json(st.stats.snapshot())
}

async fn reset_stats(State(st): State<AppState>) -> StatusCode {
    st.stats.reset();
    StatusCode::NO_CONTENT
}

#[derive(Deserialize)]
struct NewContainer {
    name: String,
}

async fn create_container(State(st): State<AppState>, Json(req): Json<NewContainer>) -> Result<Response, ApiError> {
    let name = req.name.clone();
    blocking(move || st.store.create_container(&req.name)).await?;
    Ok((StatusCode::CREATED, Json(serde_json::json!({"name": name}))).into_response())
}

async fn list_containers(State(st): State<AppState>) -> Json<Vec<String>> {
    Json(st.store.list_containers())
}

#[derive(Serialize, Deserialize)]
pub struct PutResponse {
    pub container: String,
    pub path: String,
    pub size: u64,
    pub version: u64,
}

async fn put_blob(
    State(st): State<AppState>,
    Path((container, path)): Path<(String, String)>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let content_type = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("application/octet-stream")
        .to_string();
    let blob = blocking(move || st.store.put_blob(&container, &path, &body, &content_type)).await?;
    let resp = PutResponse {
        container: blob.container,
        path: blob.path,
        size: blob.size,
        version: blob.version,
    };
    Ok((StatusCode::CREATED, Json(resp)).into_response())
}

async fn get_blob(
    State(st): State<AppState>,
    Path((container, path)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let blob = blocking(move || st.store.get_blob(&container, &path)).await?;
    Ok(Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, blob.content_type)
        .header("x-blob-version", blob.version)
        .body(Body::from(blob.bytes))
        .expect("valid response"))
}

async fn delete_blob(
    State(st): State<AppState>,
    Path((container, path)): Path<(String, String)>,
) -> Result<StatusCode, ApiError> {
    blocking(move || st.store.delete_blob(&container, &path)).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct ListQuery {
    #[serde(default)]
    prefix: String,
}

async fn list_blobs(
    State(st): State<AppState>,
    Path(container): Path<String>,
    Query(q): Query<ListQuery>,
) -> Result<Response, ApiError> {
    let items = blocking(move || st.store.list_blobs(&container, &q.prefix)).await?;
    Ok(Json(items).into_response())
}
