//! Pipeline registry and run execution.
//!
//! Each run is a task on the async runtime. At most `max_concurrent_runs`
//! execute at once; the rest wait Queued. Activities run in order against a
//! run-local current artifact: Copy sets it, compress replaces it, Infer
//! attaches detections and Render draws them.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use bloompipe_core::imaging::{self, BoxStyle, DimCheck, Image};
use bloompipe_core::{Detection, DetectionResponse};
use bloompipe_store::BlobStore;
use parking_lot::RwLock;
use serde_json::json;
use tokio::runtime::Handle;
use tokio::sync::Semaphore;

use crate::clock::Clock;
use crate::persist::JsonlLog;
use crate::pipeline::{BindError, BlobRef, PipelineDefinition, ProcessStep, ResolvedActivity, Step};
use crate::pool::{ComputePool, PoolError};
use crate::run::{
    ActivityRecord, ActivityStatus, PipelineRun, RunCounts, RunFilter, RunStatus, TriggerSource, DEFAULT_PAGE, MAX_PAGE,
};

pub const DEFAULT_MAX_CONCURRENT_RUNS: usize = 8;
pub const DEFAULT_RUN_TIMEOUT: Duration = Duration::from_secs(120);
const RETRY_BACKOFF: Duration = Duration::from_millis(100);

#[derive(Debug, Clone)]
pub struct OrchestratorConfig {
    /// Where run, pipeline and trigger logs live; `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub max_concurrent_runs: usize,
    pub run_timeout: Duration,
    /// Secret values by name, consulted before the environment for Infer keys.
    pub secrets: HashMap<String, String>,
    /// Sync terminal run records and definition changes to disk.
    pub fsync: bool,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            max_concurrent_runs: DEFAULT_MAX_CONCURRENT_RUNS,
            run_timeout: DEFAULT_RUN_TIMEOUT,
            secrets: HashMap::new(),
            fsync: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RunError {
    #[error("UnknownPipeline: {0}")]
    UnknownPipeline(String),
    #[error("MissingParameter: {0}")]
    MissingParameter(String),
    #[error("UnknownParameter: {0}")]
    UnknownParameter(String),
    #[error("invalid parameters: {0}")]
    BadParameters(String),
    #[error("NotFound: run {0}")]
    NotFound(String),
}

impl From<BindError> for RunError {
    fn from(e: BindError) -> Self {
        match e {
            BindError::MissingParameter(p) => RunError::MissingParameter(p),
            BindError::UnknownParameter(p) => RunError::UnknownParameter(p),
            BindError::Expression(m) => RunError::BadParameters(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ApplyError {
    #[error("ValidationError: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("cannot persist pipeline: {0}")]
    Persistence(String),
}

#[derive(Debug, thiserror::Error)]
#[error("cannot open orchestrator state: {0}")]
pub struct OpenError(#[from] std::io::Error);

/// Failure of a single activity attempt.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ActivityError {
    #[error("CopyError: {0}")]
    Copy(String),
    #[error("ProcessError: {0}")]
    Process(String),
    #[error("InferError({status}): {message}")]
    InferStatus { status: u16, message: String },
    #[error("InferError: {0}")]
    Infer(String),
    #[error("RenderError: {0}")]
    Render(String),
    #[error("{0}")]
    PoolStart(String),
}

#[derive(Clone)]
struct Artifact {
    bytes: Arc<Vec<u8>>,
    /// Source path, sent to the detector as the file name hint.
    name: String,
}

#[derive(Default)]
struct RunCtx {
    current: Option<Artifact>,
    detections: HashMap<String, Vec<Detection>>,
}

struct Effect {
    output: serde_json::Value,
    current: Option<Artifact>,
    detections: Option<Vec<Detection>>,
}

impl Effect {
    fn output(output: serde_json::Value) -> Self {
        Self {
            output,
            current: None,
            detections: None,
        }
    }
}

struct Inner {
    cfg: OrchestratorConfig,
    store: Arc<BlobStore>,
    pool: Arc<ComputePool>,
    clock: Arc<dyn Clock>,
    rt: Handle,
    http: reqwest::Client,
    pipelines: RwLock<BTreeMap<String, Arc<PipelineDefinition>>>,
    runs: RwLock<HashMap<String, PipelineRun>>,
    order: RwLock<Vec<String>>,
    slots: Arc<Semaphore>,
    run_log: Option<JsonlLog>,
    pipeline_log: Option<JsonlLog>,
}

#[derive(Clone)]
pub struct Orchestrator {
    inner: Arc<Inner>,
}

impl Orchestrator {
    /// Opens the orchestrator, replaying persisted pipelines and runs. Runs
    /// that were not terminal when the previous process stopped are marked
    /// Failed with error "orphaned".
    pub fn open(
        cfg: OrchestratorConfig,
        store: Arc<BlobStore>,
        pool: Arc<ComputePool>,
        clock: Arc<dyn Clock>,
        rt: Handle,
    ) -> Result<Self, OpenError> {
        let (run_log, pipeline_log) = match &cfg.data_dir {
            Some(dir) => (
                Some(JsonlLog::open(dir.join("runs.jsonl"))?),
                Some(JsonlLog::open(dir.join("pipelines.jsonl"))?),
            ),
            None => (None, None),
        };
        let mut pipelines = BTreeMap::new();
        if let Some(log) = &pipeline_log {
            for def in JsonlLog::replay::<PipelineDefinition>(log.path())? {
                pipelines.insert(def.name.clone(), Arc::new(def));
            }
        }
        let mut runs: HashMap<String, PipelineRun> = HashMap::new();
        let mut order = Vec::new();
        if let Some(log) = &run_log {
            for run in JsonlLog::replay::<PipelineRun>(log.path())? {
                if !runs.contains_key(&run.run_id) {
                    order.push(run.run_id.clone());
                }
                runs.insert(run.run_id.clone(), run);
            }
            let now = clock.now();
            for id in &order {
                let run = runs.get_mut(id).expect("ordered ids are present");
                if run.status.is_terminal() {
                    continue;
                }
                orphan(run, now);
                log.append(run, cfg.fsync)?;
            }
        }
        let http = reqwest::Client::builder()
            .pool_max_idle_per_host(64)
            .build()
            .expect("http client");
        Ok(Self {
            inner: Arc::new(Inner {
                slots: Arc::new(Semaphore::new(cfg.max_concurrent_runs.max(1))),
                cfg,
                store,
                pool,
                clock,
                rt,
                http,
                pipelines: RwLock::new(pipelines),
                runs: RwLock::new(runs),
                order: RwLock::new(order),
                run_log,
                pipeline_log,
            }),
        })
    }

    pub fn store(&self) -> &Arc<BlobStore> {
        &self.inner.store
    }

    pub fn pool(&self) -> &Arc<ComputePool> {
        &self.inner.pool
    }

    /// Creates or replaces a pipeline. Runs already started keep the
    /// definition they started with.
    pub fn apply_pipeline(&self, def: PipelineDefinition) -> Result<(), ApplyError> {
        def.validate().map_err(ApplyError::Validation)?;
        if let Some(log) = &self.inner.pipeline_log {
            log.append(&def, self.inner.cfg.fsync)
                .map_err(|e| ApplyError::Persistence(e.to_string()))?;
        }
        self.inner.pipelines.write().insert(def.name.clone(), Arc::new(def));
        Ok(())
    }

    pub fn pipeline(&self, name: &str) -> Option<Arc<PipelineDefinition>> {
        self.inner.pipelines.read().get(name).cloned()
    }

    pub fn pipelines(&self) -> Vec<PipelineDefinition> {
        self.inner.pipelines.read().values().map(|p| (**p).clone()).collect()
    }

    /// Queues a run and returns its id without waiting for it.
    pub fn start_run(
        &self,
        pipeline: &str,
        parameters: BTreeMap<String, String>,
        source: TriggerSource,
    ) -> Result<String, RunError> {
        let def = self
            .pipeline(pipeline)
            .ok_or_else(|| RunError::UnknownPipeline(pipeline.to_string()))?;
        let params = def.bind_parameters(&parameters)?;
        let steps = def.resolve(&params)?;
        let run = PipelineRun {
            run_id: uuid::Uuid::new_v4().to_string(),
            pipeline: def.name.clone(),
            trigger: source,
            parameters: params,
            status: RunStatus::Queued,
            activities: def
                .activities
                .iter()
                .map(|a| ActivityRecord {
                    name: a.name.clone(),
                    kind: a.spec.kind(),
                    status: ActivityStatus::Pending,
                    started_at: None,
                    ended_at: None,
                    attempts: 0,
                    error: None,
                    output: None,
                })
                .collect(),
            created_at: self.inner.clock.now(),
            started_at: None,
            ended_at: None,
            error: None,
        };
        let id = run.run_id.clone();
        self.inner.persist(&run);
        self.inner.order.write().push(id.clone());
        self.inner.runs.write().insert(id.clone(), run);
        let inner = self.inner.clone();
        let run_id = id.clone();
        self.inner.rt.spawn(async move { execute(inner, run_id, steps).await });
        Ok(id)
    }

    pub fn get_run(&self, run_id: &str) -> Result<PipelineRun, RunError> {
        self.inner
            .runs
            .read()
            .get(run_id)
            .cloned()
            .ok_or_else(|| RunError::NotFound(run_id.to_string()))
    }

    pub fn list_runs(&self, filter: &RunFilter) -> Vec<PipelineRun> {
        let order = self.inner.order.read();
        let runs = self.inner.runs.read();
        let limit = filter.limit.unwrap_or(DEFAULT_PAGE).min(MAX_PAGE);
        order
            .iter()
            .rev()
            .filter_map(|id| runs.get(id))
            .filter(|r| filter.pipeline.as_ref().is_none_or(|p| &r.pipeline == p))
            .filter(|r| filter.status.is_none_or(|s| r.status == s))
            .filter(|r| filter.since.is_none_or(|t| r.created_at >= t))
            .skip(filter.offset.unwrap_or(0))
            .take(limit)
            .cloned()
            .collect()
    }

    pub fn counts(&self) -> RunCounts {
        let mut c = RunCounts::default();
        for r in self.inner.runs.read().values() {
            match r.status {
                RunStatus::Queued => c.queued += 1,
                RunStatus::InProgress => c.in_progress += 1,
                RunStatus::Succeeded => c.succeeded += 1,
                RunStatus::Failed => c.failed += 1,
            }
        }
        c
    }

    /// Polls until the run is terminal. Returns the last snapshot seen.
    pub async fn wait_terminal(&self, run_id: &str, timeout: Duration) -> Result<PipelineRun, RunError> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let run = self.get_run(run_id)?;
            if run.status.is_terminal() || tokio::time::Instant::now() >= deadline {
                return Ok(run);
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }
}

fn orphan(run: &mut PipelineRun, now: chrono::DateTime<chrono::Utc>) {
    run.status = RunStatus::Failed;
    run.error = Some("orphaned".into());
    run.ended_at = Some(now);
    for a in &mut run.activities {
        match a.status {
            ActivityStatus::InProgress => {
                a.status = ActivityStatus::Failed;
                a.error = Some("orphaned".into());
                a.ended_at = Some(now);
            }
            ActivityStatus::Pending => a.status = ActivityStatus::Skipped,
            _ => {}
        }
    }
}

impl Inner {
    fn persist(&self, run: &PipelineRun) {
        if let Some(log) = &self.run_log {
            // only terminal records need to survive a crash; earlier ones are
            // superseded or orphaned on replay
            if let Err(e) = log.append(run, self.cfg.fsync && run.status.is_terminal()) {
                tracing::error!(run = %run.run_id, error = %e, "cannot persist run record");
            }
        }
    }

    fn update(&self, run_id: &str, f: impl FnOnce(&mut PipelineRun)) {
        let snapshot = {
            let mut runs = self.runs.write();
            let Some(run) = runs.get_mut(run_id) else { return };
            f(run);
            run.clone()
        };
        self.persist(&snapshot);
    }

    fn secret(&self, name: &str) -> Option<String> {
        self.cfg.secrets.get(name).cloned().or_else(|| std::env::var(name).ok())
    }
}

async fn execute(inner: Arc<Inner>, run_id: String, steps: Vec<ResolvedActivity>) {
    let _slot = inner
        .slots
        .clone()
        .acquire_owned()
        .await
        .expect("semaphore never closes");
    let now = inner.clock.now();
    inner.update(&run_id, |r| {
        r.status = RunStatus::InProgress;
        r.started_at = Some(now);
    });
    let timeout = inner.cfg.run_timeout;
    let ok = match tokio::time::timeout(timeout, run_steps(&inner, &run_id, &steps)).await {
        Ok(ok) => ok,
        Err(_) => {
            let now = inner.clock.now();
            inner.update(&run_id, |r| {
                for a in &mut r.activities {
                    match a.status {
                        ActivityStatus::InProgress => {
                            a.status = ActivityStatus::Failed;
                            a.error = Some(format!("run timeout after {} s", timeout.as_secs_f64()));
                            a.ended_at = Some(now);
                        }
                        ActivityStatus::Pending => a.status = ActivityStatus::Skipped,
                        _ => {}
                    }
                }
            });
            false
        }
    };
    let now = inner.clock.now();
    inner.update(&run_id, |r| {
        r.status = if ok { RunStatus::Succeeded } else { RunStatus::Failed };
        if !ok {
            r.error = r.activities.iter().find_map(|a| a.error.clone());
        }
        r.ended_at = Some(now);
    });
}

async fn run_steps(inner: &Arc<Inner>, run_id: &str, steps: &[ResolvedActivity]) -> bool {
    let mut ctx = RunCtx::default();
    for (i, act) in steps.iter().enumerate() {
        let started = inner.clock.now();
        inner.update(run_id, |r| {
            r.activities[i].status = ActivityStatus::InProgress;
            r.activities[i].started_at = Some(started);
        });
        let mut attempts = 0;
        let result = loop {
            attempts += 1;
            match exec_step(inner, act, &ctx).await {
                Ok(effect) => break Ok(effect),
                Err(e) if attempts <= act.retries => {
                    tracing::debug!(run = run_id, activity = %act.name, attempts, error = %e, "activity failed, retrying");
                    tokio::time::sleep(RETRY_BACKOFF).await;
                }
                Err(e) => break Err(e),
            }
        };
        let ended = inner.clock.now();
        match result {
            Ok(effect) => {
                if let Some(c) = effect.current {
                    ctx.current = Some(c);
                }
                if let Some(d) = effect.detections {
                    ctx.detections.insert(act.name.clone(), d);
                }
                inner.update(run_id, |r| {
                    let a = &mut r.activities[i];
                    a.status = ActivityStatus::Succeeded;
                    a.ended_at = Some(ended);
                    a.attempts = attempts;
                    a.output = Some(effect.output);
                });
            }
            Err(e) => {
                inner.update(run_id, |r| {
                    let a = &mut r.activities[i];
                    a.status = ActivityStatus::Failed;
                    a.ended_at = Some(ended);
                    a.attempts = attempts;
                    a.error = Some(e.to_string());
                    for later in &mut r.activities[i + 1..] {
                        later.status = ActivityStatus::Skipped;
                    }
                });
                return false;
            }
        }
    }
    true
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> T {
    tokio::task::spawn_blocking(f)
        .await
        .expect("blocking store task panicked")
}

async fn on_pool<T: Send + 'static>(
    pool: &ComputePool,
    f: impl FnOnce() -> T + Send + 'static,
    fail: fn(String) -> ActivityError,
) -> Result<T, ActivityError> {
    match pool.submit(f).join().await {
        Ok(out) => Ok(out.value),
        Err(e @ PoolError::StartTimeout { .. }) => Err(ActivityError::PoolStart(e.to_string())),
        Err(e) => Err(fail(e.to_string())),
    }
}

async fn put(
    store: &Arc<BlobStore>,
    to: &BlobRef,
    bytes: Arc<Vec<u8>>,
    content_type: &'static str,
) -> Result<(), String> {
    let (store, to) = (store.clone(), to.clone());
    blocking(move || store.put_blob(&to.container, &to.path, &bytes, content_type))
        .await
        .map(|_| ())
        .map_err(|e| e.to_string())
}

fn current(ctx: &RunCtx, fail: fn(String) -> ActivityError) -> Result<Artifact, ActivityError> {
    ctx.current
        .clone()
        .ok_or_else(|| fail("no input image; the pipeline needs a Copy activity first".into()))
}

async fn exec_step(inner: &Arc<Inner>, act: &ResolvedActivity, ctx: &RunCtx) -> Result<Effect, ActivityError> {
    match &act.step {
        Step::Copy { source, sink } => {
            let store = inner.store.clone();
            let (src, dst) = (source.clone(), sink.clone());
            let blob = blocking(move || {
                let blob = store.get_blob(&src.container, &src.path)?;
                store.put_blob(&dst.container, &dst.path, &blob.bytes, &blob.content_type)?;
                Ok::<_, bloompipe_store::StoreError>(blob)
            })
            .await
            .map_err(|e| ActivityError::Copy(e.to_string()))?;
            Ok(Effect {
                output: json!({"bytes": blob.size, "sink": format!("{}/{}", sink.container, sink.path)}),
                current: Some(Artifact {
                    bytes: Arc::new(blob.bytes),
                    name: source.path.clone(),
                }),
                detections: None,
            })
        }
        Step::Process { step, sink } => {
            let input = current(ctx, ActivityError::Process)?;
            match *step {
                ProcessStep::Compress { quality } => {
                    let bytes = input.bytes.clone();
                    let out = on_pool(
                        &inner.pool,
                        move || imaging::compress_jpeg(&bytes, quality),
                        ActivityError::Process,
                    )
                    .await?
                    .map_err(|e| ActivityError::Process(e.to_string()))?;
                    let out = Arc::new(out);
                    if let Some(s) = sink {
                        put(&inner.store, s, out.clone(), "image/jpeg")
                            .await
                            .map_err(ActivityError::Process)?;
                    }
                    Ok(Effect {
                        output: json!({"quality": quality, "bytes_in": input.bytes.len(), "bytes_out": out.len()}),
                        current: Some(Artifact {
                            bytes: out,
                            name: input.name,
                        }),
                        detections: None,
                    })
                }
                ProcessStep::Slice { k, quality } => {
                    let bytes = input.bytes.clone();
                    let parts = on_pool(
                        &inner.pool,
                        move || -> Result<Vec<Vec<u8>>, imaging::ImagingError> {
                            let img = Image::decode(&bytes)?;
                            imaging::slice_vertical(&img, k)?
                                .iter()
                                .map(|s| s.encode_jpeg(quality))
                                .collect()
                        },
                        ActivityError::Process,
                    )
                    .await?
                    .map_err(|e| ActivityError::Process(e.to_string()))?;
                    let prefix = sink.as_ref().expect("validated: slice has a sink");
                    let mut paths = Vec::new();
                    for (i, part) in parts.into_iter().enumerate() {
                        let to = BlobRef {
                            container: prefix.container.clone(),
                            path: format!("{}{i}.jpg", prefix.path),
                        };
                        put(&inner.store, &to, Arc::new(part), "image/jpeg")
                            .await
                            .map_err(ActivityError::Process)?;
                        paths.push(to.path);
                    }
                    Ok(Effect::output(
                        json!({"slices": k, "container": prefix.container, "paths": paths}),
                    ))
                }
                ProcessStep::ValidateDims { width, height } => {
                    let bytes = input.bytes.clone();
                    let check = on_pool(
                        &inner.pool,
                        move || Image::decode(&bytes).map(|img| imaging::validate_dims(&img, width, height)),
                        ActivityError::Process,
                    )
                    .await?
                    .map_err(|e| ActivityError::Process(e.to_string()))?;
                    match check {
                        DimCheck::Pass => Ok(Effect::output(
                            json!({"result": "Pass", "width": width, "height": height}),
                        )),
                        DimCheck::Fail {
                            actual_width,
                            actual_height,
                        } => Err(ActivityError::Process(format!(
                            "expected {width}x{height}, got {actual_width}x{actual_height}"
                        ))),
                    }
                }
            }
        }
        Step::Infer {
            endpoint,
            auth_key_ref,
            timeout_ms,
        } => {
            let input = current(ctx, ActivityError::Infer)?;
            let key = inner
                .secret(auth_key_ref)
                .ok_or_else(|| ActivityError::Infer(format!("secret {auth_key_ref} is not set")))?;
            let resp = inner
                .http
                .post(endpoint)
                .timeout(Duration::from_millis(*timeout_ms))
                .bearer_auth(key)
                .header("x-filename", &input.name)
                .header("content-type", "application/octet-stream")
                .body((*input.bytes).clone())
                .send()
                .await
                .map_err(|e| ActivityError::Infer(e.to_string()))?;
            let status = resp.status().as_u16();
            let body = resp.bytes().await.map_err(|e| ActivityError::Infer(e.to_string()))?;
            if status != 200 {
                let message = String::from_utf8_lossy(&body[..body.len().min(200)]).into_owned();
                return Err(ActivityError::InferStatus { status, message });
            }
            let parsed: DetectionResponse = serde_json::from_slice(&body)
                .map_err(|e| ActivityError::Infer(format!("invalid detector response: {e}")))?;
            Ok(Effect {
                output: json!({"status": status, "detections": parsed.boxes.len()}),
                current: None,
                detections: Some(parsed.boxes),
            })
        }
        Step::Render {
            detections_from,
            sink,
            detections_sink,
            style,
        } => {
            let input = current(ctx, ActivityError::Render)?;
            let boxes = ctx
                .detections
                .get(detections_from)
                .cloned()
                .ok_or_else(|| ActivityError::Render(format!("no detections from {detections_from:?}")))?;
            let bytes = input.bytes.clone();
            let to_draw = boxes.clone();
            let box_style = BoxStyle {
                thickness: style.thickness,
                color: style.color,
                label: style.label,
            };
            let quality = style.quality;
            let annotated = on_pool(
                &inner.pool,
                move || -> Result<Vec<u8>, imaging::ImagingError> {
                    let img = Image::decode(&bytes)?;
                    imaging::render_boxes(&img, &to_draw, &box_style).encode_jpeg(quality)
                },
                ActivityError::Render,
            )
            .await?
            .map_err(|e| ActivityError::Render(e.to_string()))?;
            let doc = DetectionResponse {
                filename: input.name.clone(),
                boxes,
            };
            put(&inner.store, sink, Arc::new(annotated), "image/jpeg")
                .await
                .map_err(ActivityError::Render)?;
            put(
                &inner.store,
                detections_sink,
                Arc::new(doc.to_json()),
                "application/json",
            )
            .await
            .map_err(ActivityError::Render)?;
            Ok(Effect::output(json!({
                "image": format!("{}/{}", sink.container, sink.path),
                "detections": format!("{}/{}", detections_sink.container, detections_sink.path),
                "boxes": doc.boxes.len(),
            })))
        }
    }
}
