//! Event and schedule triggers.
//!
//! Event triggers subscribe to blob-created events and start one run per
//! matching event. Schedule triggers fire on their cron expression when
//! [`TriggerEngine::tick`] is called at or after the next fire time; fires
//! missed while nothing ticked are skipped. A schedule trigger may name a
//! batch source, in which case each fire starts one run per blob in the
//! source that no earlier fire of the trigger has processed.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::{Arc, Weak};

use bloompipe_store::{BlobEvent, BlobStore, EventBus, EventFilter, EventTarget};
use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::cron::CronExpr;
use crate::expr::{Context, Expr, Ref};
use crate::orchestrator::Orchestrator;
use crate::persist::JsonlLog;
use crate::pipeline::valid_name;
use crate::run::{SourceKind, TriggerSource};

pub const DEFAULT_MAX_DELIVERY_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriggerKind {
    Event,
    Schedule,
}

/// Blobs selected by container, path prefix and path suffix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobSelector {
    pub container: String,
    #[serde(default)]
    pub prefix: String,
    #[serde(default)]
    pub suffix: String,
}

impl BlobSelector {
    fn matches(&self, path: &str) -> bool {
        path.starts_with(&self.prefix) && path.ends_with(&self.suffix)
    }
}

fn enabled_by_default() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub name: String,
    pub kind: TriggerKind,
    pub pipeline: String,
    /// Pipeline parameter name to binding expression.
    #[serde(default)]
    pub bindings: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cron: Option<String>,
    /// Event triggers only: which blob-created events start runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_filter: Option<BlobSelector>,
    /// Schedule triggers only: blobs to process, one run each.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<BlobSelector>,
    #[serde(default = "enabled_by_default")]
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TriggerError {
    #[error("UnknownPipeline: {0}")]
    UnknownPipeline(String),
    #[error("DuplicateName: trigger {0} already exists")]
    DuplicateName(String),
    #[error("BadBinding: {0}")]
    BadBinding(String),
    #[error("invalid trigger: {0}")]
    Invalid(String),
    #[error("unknown trigger {0}")]
    UnknownTrigger(String),
    #[error("BindingEvaluationError: {0}")]
    BindingEvaluation(String),
    #[error("run rejected: {0}")]
    RunRejected(String),
    #[error("cannot persist trigger: {0}")]
    Persistence(String),
}

/// What a trigger needs from the orchestrator.
pub trait RunSink: Send + Sync {
    /// Parameter names of `pipeline` with whether each has a default, or
    /// `None` if no such pipeline exists.
    fn pipeline_parameters(&self, pipeline: &str) -> Option<Vec<(String, bool)>>;

    fn start_run(
        &self,
        pipeline: &str,
        parameters: BTreeMap<String, String>,
        source: TriggerSource,
    ) -> Result<String, String>;
}

impl RunSink for Orchestrator {
    fn pipeline_parameters(&self, pipeline: &str) -> Option<Vec<(String, bool)>> {
        self.pipeline(pipeline).map(|p| {
            p.parameters
                .iter()
                .map(|d| (d.name.clone(), d.default.is_some()))
                .collect()
        })
    }

    fn start_run(
        &self,
        pipeline: &str,
        parameters: BTreeMap<String, String>,
        source: TriggerSource,
    ) -> Result<String, String> {
        Orchestrator::start_run(self, pipeline, parameters, source).map_err(|e| e.to_string())
    }
}

/// Trigger context supplied when firing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FireContext {
    Event { container: String, path: String },
    Schedule { fire_time: DateTime<Utc> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerStatus {
    #[serde(flatten)]
    pub spec: TriggerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_fire: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_fire: Option<DateTime<Utc>>,
    pub fires: u64,
    pub runs_started: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fire {
    pub trigger: String,
    pub fire_time: DateTime<Utc>,
    pub run_ids: Vec<String>,
    pub errors: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum TriggerRecord {
    Register { spec: Box<TriggerSpec> },
    SetEnabled { name: String, enabled: bool },
}

struct TriggerState {
    spec: TriggerSpec,
    bindings: Vec<(String, Expr)>,
    cron: Option<CronExpr>,
    next_fire: Option<DateTime<Utc>>,
    last_fire: Option<DateTime<Utc>>,
    fires: u64,
    runs_started: u64,
    /// (path, version) pairs already handed to a batch run.
    processed: HashSet<(String, u64)>,
}

impl TriggerState {
    fn status(&self) -> TriggerStatus {
        TriggerStatus {
            spec: self.spec.clone(),
            next_fire: self.next_fire,
            last_fire: self.last_fire,
            fires: self.fires,
            runs_started: self.runs_started,
        }
    }
}

struct EngineInner {
    sink: Arc<dyn RunSink>,
    bus: Arc<EventBus>,
    store: Arc<BlobStore>,
    clock: Arc<dyn Clock>,
    triggers: RwLock<BTreeMap<String, TriggerState>>,
    log: Option<JsonlLog>,
    /// Serializes batch fan-out so two fires never claim the same blob.
    batch_lock: Mutex<()>,
}

#[derive(Clone)]
pub struct TriggerEngine {
    inner: Arc<EngineInner>,
}

struct TriggerTarget {
    engine: Weak<EngineInner>,
    name: String,
}

impl EventTarget for TriggerTarget {
    fn deliver(&self, event: &BlobEvent) -> Result<(), String> {
        let inner = self.engine.upgrade().ok_or("trigger engine stopped")?;
        let engine = TriggerEngine { inner };
        let ctx = FireContext::Event {
            container: event.container.clone(),
            path: event.path.clone(),
        };
        match engine.fire(&self.name, ctx) {
            Ok(_) => Ok(()),
            Err(e) => Err(e.to_string()),
        }
    }
}

impl TriggerEngine {
    /// Creates the engine and re-registers triggers persisted under `data_dir`.
    pub fn new(
        sink: Arc<dyn RunSink>,
        bus: Arc<EventBus>,
        store: Arc<BlobStore>,
        clock: Arc<dyn Clock>,
        data_dir: Option<&Path>,
    ) -> std::io::Result<Self> {
        let log_path = data_dir.map(|d| d.join("triggers.jsonl"));
        let history: Vec<TriggerRecord> = match &log_path {
            Some(p) => JsonlLog::replay(p)?,
            None => Vec::new(),
        };
        let log = log_path.map(JsonlLog::open).transpose()?;
        let engine = Self {
            inner: Arc::new(EngineInner {
                sink,
                bus,
                store,
                clock,
                triggers: RwLock::new(BTreeMap::new()),
                log,
                batch_lock: Mutex::new(()),
            }),
        };
        for rec in history {
            let outcome = match rec {
                TriggerRecord::Register { spec } => engine.install(*spec).map(|_| ()),
                TriggerRecord::SetEnabled { name, enabled } => engine.apply_enabled(&name, enabled).map(|_| ()),
            };
            if let Err(e) = outcome {
                tracing::warn!(error = %e, "skipping persisted trigger record");
            }
        }
        Ok(engine)
    }

    fn persist(&self, rec: &TriggerRecord) -> Result<(), TriggerError> {
        if let Some(log) = &self.inner.log {
            log.append(rec, true)
                .map_err(|e| TriggerError::Persistence(e.to_string()))?;
        }
        Ok(())
    }

    pub fn register(&self, spec: TriggerSpec) -> Result<TriggerStatus, TriggerError> {
        let status = self.install(spec.clone())?;
        if let Err(e) = self.persist(&TriggerRecord::Register { spec: Box::new(spec) }) {
            tracing::error!(error = %e, "trigger registered but not persisted");
        }
        Ok(status)
    }

    fn install(&self, spec: TriggerSpec) -> Result<TriggerStatus, TriggerError> {
        let state = self.validate(spec)?;
        let mut triggers = self.inner.triggers.write();
        if triggers.contains_key(&state.spec.name) {
            return Err(TriggerError::DuplicateName(state.spec.name));
        }
        let name = state.spec.name.clone();
        if let (TriggerKind::Event, Some(f)) = (state.spec.kind, &state.spec.event_filter) {
            let target = target_id(&name);
            self.inner.bus.register_target(
                target.clone(),
                Arc::new(TriggerTarget {
                    engine: Arc::downgrade(&self.inner),
                    name: name.clone(),
                }),
            );
            let filter = EventFilter::created_in(f.container.clone())
                .with_prefix(f.prefix.clone())
                .with_suffix(f.suffix.clone());
            self.inner
                .bus
                .subscribe(filter, &target, DEFAULT_MAX_DELIVERY_ATTEMPTS)
                .map_err(|e| TriggerError::Invalid(e.to_string()))?;
        }
        let status = state.status();
        triggers.insert(name, state);
        Ok(status)
    }

    fn validate(&self, spec: TriggerSpec) -> Result<TriggerState, TriggerError> {
        if !valid_name(&spec.name) {
            return Err(TriggerError::Invalid(format!(
                "trigger name {:?} is invalid",
                spec.name
            )));
        }
        let params = self
            .inner
            .sink
            .pipeline_parameters(&spec.pipeline)
            .ok_or_else(|| TriggerError::UnknownPipeline(spec.pipeline.clone()))?;
        let cron = match (spec.kind, &spec.cron) {
            (TriggerKind::Schedule, Some(c)) => {
                let expr = CronExpr::parse(c).map_err(|e| TriggerError::Invalid(format!("cron {c:?}: {e}")))?;
                expr.next_fire(self.inner.clock.now())
                    .map_err(|e| TriggerError::Invalid(format!("cron {c:?}: {e}")))?;
                Some(expr)
            }
            (TriggerKind::Schedule, None) => {
                return Err(TriggerError::Invalid("schedule triggers need a cron expression".into()))
            }
            (TriggerKind::Event, Some(_)) => {
                return Err(TriggerError::Invalid("event triggers take no cron expression".into()))
            }
            (TriggerKind::Event, None) => None,
        };
        match (spec.kind, &spec.event_filter, &spec.batch) {
            (TriggerKind::Event, None, _) => {
                return Err(TriggerError::Invalid("event triggers need an event_filter".into()))
            }
            (TriggerKind::Event, _, Some(_)) => {
                return Err(TriggerError::Invalid("batch applies to schedule triggers only".into()))
            }
            (TriggerKind::Schedule, Some(_), _) => {
                return Err(TriggerError::Invalid(
                    "event_filter applies to event triggers only".into(),
                ))
            }
            _ => {}
        }
        for sel in spec.event_filter.iter().chain(spec.batch.iter()) {
            bloompipe_store::validate_container_name(&sel.container)
                .map_err(|e| TriggerError::Invalid(e.to_string()))?;
        }
        let allowed: &[Ref] = match (spec.kind, spec.batch.is_some()) {
            (TriggerKind::Event, _) => &[Ref::EventContainer, Ref::EventPath],
            (TriggerKind::Schedule, false) => &[Ref::ScheduleFireTime],
            (TriggerKind::Schedule, true) => &[Ref::ScheduleFireTime, Ref::BlobContainer, Ref::BlobPath],
        };
        let mut bindings = Vec::new();
        for (param, text) in &spec.bindings {
            if !params.iter().any(|(p, _)| p == param) {
                return Err(TriggerError::BadBinding(format!(
                    "pipeline {} has no parameter {param:?}",
                    spec.pipeline
                )));
            }
            let e = Expr::parse(text).map_err(|e| TriggerError::BadBinding(e.to_string()))?;
            if let Some(r) = e.refs().find(|r| !allowed.contains(r)) {
                return Err(TriggerError::BadBinding(format!(
                    "{param}: {r} is not available on {:?} triggers{}",
                    spec.kind,
                    if spec.batch.is_some() {
                        " with a batch source"
                    } else {
                        ""
                    }
                )));
            }
            bindings.push((param.clone(), e));
        }
        if let Some((p, _)) = params
            .iter()
            .find(|(p, has_default)| !has_default && !spec.bindings.contains_key(p))
        {
            return Err(TriggerError::BadBinding(format!(
                "required parameter {p:?} is not bound"
            )));
        }
        let next_fire = match (&cron, spec.enabled) {
            (Some(c), true) => c.next_fire(self.inner.clock.now()).ok(),
            _ => None,
        };
        Ok(TriggerState {
            spec,
            bindings,
            cron,
            next_fire,
            last_fire: None,
            fires: 0,
            runs_started: 0,
            processed: HashSet::new(),
        })
    }

    pub fn set_enabled(&self, name: &str, enabled: bool) -> Result<TriggerStatus, TriggerError> {
        let status = self.apply_enabled(name, enabled)?;
        self.persist(&TriggerRecord::SetEnabled {
            name: name.to_string(),
            enabled,
        })?;
        Ok(status)
    }

    fn apply_enabled(&self, name: &str, enabled: bool) -> Result<TriggerStatus, TriggerError> {
        let now = self.inner.clock.now();
        let mut triggers = self.inner.triggers.write();
        let t = triggers
            .get_mut(name)
            .ok_or_else(|| TriggerError::UnknownTrigger(name.to_string()))?;
        if enabled && !t.spec.enabled {
            t.next_fire = t.cron.as_ref().and_then(|c| c.next_fire(now).ok());
        }
        if !enabled {
            t.next_fire = None;
        }
        t.spec.enabled = enabled;
        Ok(t.status())
    }

    pub fn get(&self, name: &str) -> Option<TriggerStatus> {
        self.inner.triggers.read().get(name).map(TriggerState::status)
    }

    pub fn list(&self) -> Vec<TriggerStatus> {
        self.inner.triggers.read().values().map(TriggerState::status).collect()
    }

    /// Evaluates the bindings against `ctx` and starts the resulting run(s).
    /// A disabled trigger starts nothing and returns no run ids.
    pub fn fire(&self, name: &str, ctx: FireContext) -> Result<Vec<String>, TriggerError> {
        let (spec, bindings) = {
            let triggers = self.inner.triggers.read();
            let t = triggers
                .get(name)
                .ok_or_else(|| TriggerError::UnknownTrigger(name.to_string()))?;
            if !t.spec.enabled {
                return Ok(Vec::new());
            }
            (t.spec.clone(), t.bindings.clone())
        };
        let source_kind = match spec.kind {
            TriggerKind::Event => SourceKind::Event,
            TriggerKind::Schedule => SourceKind::Schedule,
        };
        let base = match &ctx {
            FireContext::Event { container, path } => Context {
                event: Some((container, path)),
                ..Context::default()
            },
            FireContext::Schedule { fire_time } => Context {
                fire_time: Some(*fire_time),
                ..Context::default()
            },
        };
        let items: Vec<Option<(String, u64)>> = match (&spec.batch, &ctx) {
            (Some(sel), FireContext::Schedule { .. }) => self.pending_batch(name, sel)?.into_iter().map(Some).collect(),
            _ => vec![None],
        };
        let container = spec.batch.as_ref().map(|b| b.container.clone()).unwrap_or_default();
        let mut run_ids = Vec::new();
        for item in items {
            let ctx = Context {
                blob: item.as_ref().map(|(p, _)| (container.as_str(), p.as_str())),
                ..base
            };
            let mut params = BTreeMap::new();
            for (param, e) in &bindings {
                let v = e
                    .eval(&ctx)
                    .map_err(|e| TriggerError::BindingEvaluation(format!("{param}: {e}")))?;
                params.insert(param.clone(), v);
            }
            let id = self
                .inner
                .sink
                .start_run(&spec.pipeline, params, TriggerSource::trigger(source_kind, name))
                .map_err(TriggerError::RunRejected)?;
            run_ids.push(id);
            let mut triggers = self.inner.triggers.write();
            if let Some(t) = triggers.get_mut(name) {
                t.runs_started += 1;
                if let Some(key) = item {
                    t.processed.insert(key);
                }
            }
        }
        Ok(run_ids)
    }

    fn pending_batch(&self, name: &str, sel: &BlobSelector) -> Result<Vec<(String, u64)>, TriggerError> {
        let _guard = self.inner.batch_lock.lock();
        let blobs = self
            .inner
            .store
            .list_blobs(&sel.container, &sel.prefix)
            .map_err(|e| TriggerError::RunRejected(format!("cannot list batch source: {e}")))?;
        let triggers = self.inner.triggers.read();
        let done = &triggers.get(name).expect("trigger exists while firing").processed;
        Ok(blobs
            .into_iter()
            .filter(|b| sel.matches(&b.path))
            .map(|b| (b.path, b.version))
            .filter(|k| !done.contains(k))
            .collect())
    }

    /// Fires every enabled schedule trigger that is due at `now`.
    pub fn tick(&self, now: DateTime<Utc>) -> Vec<Fire> {
        let due: Vec<(String, DateTime<Utc>)> = {
            let mut triggers = self.inner.triggers.write();
            triggers
                .values_mut()
                .filter(|t| t.spec.enabled)
                .filter_map(|t| {
                    let at = t.next_fire.filter(|n| *n <= now)?;
                    t.next_fire = t.cron.as_ref().and_then(|c| c.next_fire(now).ok());
                    t.last_fire = Some(at);
                    t.fires += 1;
                    Some((t.spec.name.clone(), at))
                })
                .collect()
        };
        due.into_iter()
            .map(|(name, at)| {
                let (run_ids, errors) = match self.fire(&name, FireContext::Schedule { fire_time: at }) {
                    Ok(ids) => (ids, Vec::new()),
                    Err(e) => {
                        tracing::warn!(trigger = %name, error = %e, "schedule fire failed");
                        (Vec::new(), vec![e.to_string()])
                    }
                };
                Fire {
                    trigger: name,
                    fire_time: at,
                    run_ids,
                    errors,
                }
            })
            .collect()
    }
}

fn target_id(name: &str) -> String {
    format!("trigger:{name}")
}
