//! REST front end for the orchestrator and trigger engine.
//!
//! | method | path                                  | result                          |
//! |--------|---------------------------------------|---------------------------------|
//! | POST   | `/v1/pipelines`                       | 201, 400 with violations        |
//! | GET    | `/v1/pipelines`, `/v1/pipelines/{n}`  | 200, 404                        |
//! | POST   | `/v1/pipelines/{n}/runs`              | 202 `{"run_id": ..}`, 400, 404  |
//! | GET    | `/v1/runs/{id}`                       | 200 run, 404                    |
//! | GET    | `/v1/runs?pipeline=&status=&since=&limit=&offset=` | 200 `{"runs": [..]}` |
//! | GET    | `/v1/runs/counts`                     | 200 counts by status            |
//! | POST   | `/v1/triggers`                        | 201, 400, 404, 409              |
//! | GET    | `/v1/triggers`, `/v1/triggers/{n}`    | 200, 404                        |
//! | POST   | `/v1/triggers/{n}/enable`, `.../disable` | 200                          |
//! | GET    | `/v1/dead-letters`                    | 200 dead-lettered deliveries    |
//! | GET    | `/v1/pool`                            | 200 pool state                  |
//! | POST   | `/v1/_clock/advance`                  | simulated clock only            |

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bloompipe_store::EventBus;
use chrono::{DateTime, Utc};
use serde::Deserialize;
use serde_json::json;

use crate::clock::FakeClock;
use crate::orchestrator::{ApplyError, Orchestrator, RunError};
use crate::pipeline::PipelineDefinition;
use crate::run::{RunFilter, RunStatus, TriggerSource};
use crate::triggers::{TriggerEngine, TriggerError, TriggerSpec};

#[derive(Clone)]
pub struct ApiState {
    pub orchestrator: Orchestrator,
    pub triggers: TriggerEngine,
    pub bus: Arc<EventBus>,
    /// Present only when the service runs on simulated time.
    pub fake_clock: Option<Arc<FakeClock>>,
}

pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl std::fmt::Display) -> Self {
        Self {
            status,
            body: json!({"error": code, "message": message.to_string()}),
        }
    }

    fn bad_request(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<RunError> for ApiError {
    fn from(e: RunError) -> Self {
        let (status, code) = match &e {
            RunError::UnknownPipeline(_) => (StatusCode::NOT_FOUND, "UnknownPipeline"),
            RunError::NotFound(_) => (StatusCode::NOT_FOUND, "NotFound"),
            RunError::MissingParameter(_) => (StatusCode::BAD_REQUEST, "MissingParameter"),
            RunError::UnknownParameter(_) => (StatusCode::BAD_REQUEST, "UnknownParameter"),
            RunError::BadParameters(_) => (StatusCode::BAD_REQUEST, "BadParameters"),
        };
        Self::new(status, code, e)
    }
}

impl From<ApplyError> for ApiError {
    fn from(e: ApplyError) -> Self {
        match e {
            ApplyError::Validation(violations) => Self {
                status: StatusCode::BAD_REQUEST,
                body: json!({
                    "error": "ValidationError",
                    "message": violations.join("; "),
                    "violations": violations,
                }),
            },
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "PersistenceError", other),
        }
    }
}

impl From<TriggerError> for ApiError {
    fn from(e: TriggerError) -> Self {
        let (status, code) = match &e {
            TriggerError::UnknownPipeline(_) => (StatusCode::NOT_FOUND, "UnknownPipeline"),
            TriggerError::UnknownTrigger(_) => (StatusCode::NOT_FOUND, "UnknownTrigger"),
            TriggerError::DuplicateName(_) => (StatusCode::CONFLICT, "DuplicateName"),
            TriggerError::BadBinding(_) => (StatusCode::BAD_REQUEST, "BadBinding"),
            TriggerError::Invalid(_) => (StatusCode::BAD_REQUEST, "InvalidTrigger"),
            TriggerError::BindingEvaluation(_) => (StatusCode::BAD_REQUEST, "BindingEvaluationError"),
            TriggerError::RunRejected(_) => (StatusCode::BAD_REQUEST, "RunRejected"),
            TriggerError::Persistence(_) => (StatusCode::INTERNAL_SERVER_ERROR, "PersistenceError"),
        };
        Self::new(status, code, e)
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON: {e}")))
}

pub fn router(state: ApiState) -> Router {
    Router::new()
        .route("/v1/health", get(|| async { Json(json!({"status": "ok"})) }))
        .route("/v1/pipelines", post(apply_pipeline).get(list_pipelines))
        .route("/v1/pipelines/{name}", get(get_pipeline))
        .route("/v1/pipelines/{name}/runs", post(start_run))
        .route("/v1/runs", get(list_runs))
        .route("/v1/runs/counts", get(run_counts))
        .route("/v1/runs/{id}", get(get_run))
        .route("/v1/triggers", post(register_trigger).get(list_triggers))
        .route("/v1/triggers/{name}", get(get_trigger))
        .route("/v1/triggers/{name}/enable", post(enable_trigger))
        .route("/v1/triggers/{name}/disable", post(disable_trigger))
        .route("/v1/dead-letters", get(dead_letters))
        .route("/v1/pool", get(pool_state))
        .route("/v1/_clock", get(clock_now))
        .route("/v1/_clock/advance", post(advance_clock))
        .with_state(state)
}

async fn apply_pipeline(State(st): State<ApiState>, body: Bytes) -> Result<Response, ApiError> {
    let def: PipelineDefinition = parse_json(&body)?;
    let name = def.name.clone();
    st.orchestrator.apply_pipeline(def)?;
    Ok((StatusCode::CREATED, Json(json!({"name": name}))).into_response())
}

async fn list_pipelines(State(st): State<ApiState>) -> Json<Vec<PipelineDefinition>> {
    Json(st.orchestrator.pipelines())
}

async fn get_pipeline(State(st): State<ApiState>, Path(name): Path<String>) -> Result<Response, ApiError> {
    let def = st.orchestrator.pipeline(&name).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "UnknownPipeline",
            format!("UnknownPipeline: {name}"),
        )
    })?;
    Ok(Json(def.as_ref().clone()).into_response())
}

#[derive(Deserialize, Default)]
struct StartRun {
    #[serde(default)]
    parameters: BTreeMap<String, String>,
}

async fn start_run(State(st): State<ApiState>, Path(name): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let req: StartRun = if body.iter().all(u8::is_ascii_whitespace) {
        StartRun::default()
    } else {
        parse_json(&body)?
    };
    let run_id = st
        .orchestrator
        .start_run(&name, req.parameters, TriggerSource::manual())?;
    Ok((StatusCode::ACCEPTED, Json(json!({"run_id": run_id}))).into_response())
}

async fn get_run(State(st): State<ApiState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(st.orchestrator.get_run(&id)?).into_response())
}

#[derive(Deserialize)]
struct RunQuery {
    pipeline: Option<String>,
    status: Option<String>,
    since: Option<String>,
    limit: Option<usize>,
    offset: Option<usize>,
}

async fn list_runs(State(st): State<ApiState>, Query(q): Query<RunQuery>) -> Result<Response, ApiError> {
    let status = q
        .status
        .as_deref()
        .map(str::parse::<RunStatus>)
        .transpose()
        .map_err(ApiError::bad_request)?;
    let since = q
        .since
        .as_deref()
        .map(|s| DateTime::parse_from_rfc3339(s).map(|t| t.with_timezone(&Utc)))
        .transpose()
        .map_err(|e| ApiError::bad_request(format!("since: {e}")))?;
    let filter = RunFilter {
        pipeline: q.pipeline,
        status,
        since,
        limit: q.limit,
        offset: q.offset,
    };
    let runs = st.orchestrator.list_runs(&filter);
    Ok(Json(json!({"runs": runs})).into_response())
}

async fn run_counts(State(st): State<ApiState>) -> Response {
    Json(st.orchestrator.counts()).into_response()
}

async fn register_trigger(State(st): State<ApiState>, body: Bytes) -> Result<Response, ApiError> {
    let spec: TriggerSpec = parse_json(&body)?;
    let engine = st.triggers.clone();
    let status = tokio::task::spawn_blocking(move || engine.register(spec))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e))??;
    Ok((StatusCode::CREATED, Json(status)).into_response())
}

async fn list_triggers(State(st): State<ApiState>) -> Response {
    Json(st.triggers.list()).into_response()
}

async fn get_trigger(State(st): State<ApiState>, Path(name): Path<String>) -> Result<Response, ApiError> {
    let status = st.triggers.get(&name).ok_or(TriggerError::UnknownTrigger(name))?;
    Ok(Json(status).into_response())
}

async fn enable_trigger(State(st): State<ApiState>, Path(name): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(st.triggers.set_enabled(&name, true)?).into_response())
}

async fn disable_trigger(State(st): State<ApiState>, Path(name): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(st.triggers.set_enabled(&name, false)?).into_response())
}

async fn dead_letters(State(st): State<ApiState>) -> Response {
    Json(st.bus.dead_letters()).into_response()
}

async fn pool_state(State(st): State<ApiState>) -> Response {
    Json(st.orchestrator.pool().state()).into_response()
}

fn fake_clock(st: &ApiState) -> Result<Arc<FakeClock>, ApiError> {
    st.fake_clock.clone().ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "NotFound",
            "service is not running on simulated time",
        )
    })
}

async fn clock_now(State(st): State<ApiState>) -> Result<Response, ApiError> {
    use crate::clock::Clock;
    let clock = fake_clock(&st)?;
    Ok(Json(json!({"now": clock.now()})).into_response())
}

fn default_step() -> u64 {
    60
}

#[derive(Deserialize)]
struct Advance {
    seconds: u64,
    #[serde(default = "default_step")]
    step_seconds: u64,
}

/// Advances simulated time in steps, ticking triggers and the pool after
/// each step.
async fn advance_clock(State(st): State<ApiState>, body: Bytes) -> Result<Response, ApiError> {
    let clock = fake_clock(&st)?;
    let req: Advance = parse_json(&body)?;
    if req.step_seconds == 0 {
        return Err(ApiError::bad_request("step_seconds must be positive"));
    }
    let out = tokio::task::spawn_blocking(move || {
        let mut remaining = req.seconds;
        let mut fires = 0usize;
        let mut runs = Vec::new();
        let mut errors = Vec::new();
        let mut now = crate::clock::Clock::now(clock.as_ref());
        while remaining > 0 {
            let step = remaining.min(req.step_seconds);
            remaining -= step;
            now = clock.advance(chrono::Duration::seconds(step as i64));
            for fire in st.triggers.tick(now) {
                fires += 1;
                runs.extend(fire.run_ids);
                errors.extend(fire.errors);
            }
            st.orchestrator.pool().tick_idle(now);
        }
        json!({"now": now, "fires": fires, "run_ids": runs, "errors": errors})
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e))?;
    Ok(Json(out).into_response())
}
