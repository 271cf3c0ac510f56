//! HTTP front end for a [`DetectorBackend`].
//!
//! `POST /v1/score` takes raw image bytes with `Authorization: Bearer <key>`
//! and an optional `X-Filename` hint, and answers with detection JSON.
//! `GET /v1/health` is the only route reachable without a key.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bloompipe_core::{DetectionResponse, Image};
use subtle::ConstantTimeEq;

use crate::backend::DetectorBackend;

pub const DEFAULT_BODY_LIMIT: usize = 16 * 1024 * 1024;
pub const FILENAME_HEADER: &str = "x-filename";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("at least one non-empty API key is required")]
    NoKeys,
}

#[derive(Clone)]
pub struct ServiceConfig {
    pub backend: Arc<dyn DetectorBackend>,
    keys: Arc<Vec<Vec<u8>>>,
    pub body_limit: usize,
}

impl ServiceConfig {
    pub fn new<K: AsRef<str>>(backend: Arc<dyn DetectorBackend>, keys: &[K]) -> Result<Self, ConfigError> {
        let keys: Vec<Vec<u8>> = keys
            .iter()
            .map(|k| k.as_ref().trim())
            .filter(|k| !k.is_empty())
            .map(|k| k.as_bytes().to_vec())
            .collect();
        if keys.is_empty() {
            return Err(ConfigError::NoKeys);
        }
        Ok(Self {
            backend,
            keys: Arc::new(keys),
            body_limit: DEFAULT_BODY_LIMIT,
        })
    }

    /// Parses a comma-separated key list, as found in `DETECTOR_KEYS`.
    pub fn with_key_list(backend: Arc<dyn DetectorBackend>, list: &str) -> Result<Self, ConfigError> {
        Self::new(backend, &list.split(',').collect::<Vec<_>>())
    }

    /// Checks every configured key so the time taken does not depend on
    /// which key, if any, matched.
    fn authorized(&self, presented: &[u8]) -> bool {
        let mut ok = subtle::Choice::from(0);
        for k in self.keys.iter() {
            ok |= k.as_slice().ct_eq(presented);
        }
        ok.into()
    }
}

pub fn router(cfg: ServiceConfig) -> Router {
    let limit = cfg.body_limit;
    let secured = Router::new()
        .route("/v1/score", post(score))
        .fallback(|| async { error(StatusCode::NOT_FOUND, "NotFound", "no such route") })
        .layer(DefaultBodyLimit::max(limit))
        .layer(middleware::from_fn_with_state(cfg.clone(), require_key));
    Router::new()
        .route("/v1/health", get(health))
        .merge(secured)
        .with_state(cfg)
}

fn error(status: StatusCode, code: &str, message: &str) -> Response {
    (status, Json(serde_json::json!({"error": code, "message": message}))).into_response()
}

async fn require_key(State(cfg): State<ServiceConfig>, req: Request, next: Next) -> Response {
    let presented = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.as_bytes().strip_prefix(b"Bearer "));
    match presented {
        Some(key) if cfg.authorized(key) => next.run(req).await,
        _ => error(StatusCode::UNAUTHORIZED, "Unauthorized", "missing or invalid API key"),
    }
}

async fn health(State(cfg): State<ServiceConfig>) -> Json<serde_json::Value> {
    Json(serde_json::json!({"status": "ok", "backend": cfg.backend.name()}))
}

async fn score(State(cfg): State<ServiceConfig>, headers: HeaderMap, body: Bytes) -> Response {
    let filename = headers
        .get(FILENAME_HEADER)
        .and_then(|v| v.to_str().ok())
        .unwrap_or_default()
        .to_string();
    let backend = cfg.backend.clone();
    let hint = filename.clone();
    let outcome = tokio::task::spawn_blocking(move || {
        let image = Image::decode(&body)?;
        Ok::<_, bloompipe_core::imaging::ImagingError>(backend.detect(&image, &hint))
    })
    .await;
    match outcome {
        Ok(Ok(boxes)) => {
            let body = DetectionResponse { filename, boxes }.to_json();
            ([(header::CONTENT_TYPE, "application/json")], body).into_response()
        }
        Ok(Err(e)) => error(StatusCode::UNPROCESSABLE_ENTITY, "UndecodableImage", &e.to_string()),
        Err(e) => {
            let id = uuid::Uuid::new_v4().to_string();
            tracing::error!(error_id = %id, error = %e, "detector backend failed");
            (
                StatusCode::INTERNAL_SERVER_ERROR,
                Json(serde_json::json!({"error": "BackendFailure", "error_id": id})),
            )
                .into_response()
        }
    }
}
