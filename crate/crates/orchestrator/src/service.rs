//! The pipeline service: blob store, event bus, compute pool, orchestrator
//! and trigger engine in one process, with the store API and the
//! orchestrator API on separate listeners.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use bloompipe_store::http::{RequestStats, StoreHttpConfig};
use bloompipe_store::{BlobStore, BusConfig, EventBus, StoreConfig, StoreError};
use chrono::{DateTime, Utc};
use serde::Deserialize;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::clock::{Clock, FakeClock, SystemClock};
use crate::http::{self, ApiState};
use crate::orchestrator::{Orchestrator, OrchestratorConfig, DEFAULT_MAX_CONCURRENT_RUNS};
use crate::pool::{ComputePool, PoolConfig};
use crate::triggers::TriggerEngine;

pub const FAKE_CLOCK_ENV: &str = "PIPE_FAKE_CLOCK";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub store_addr: SocketAddr,
    pub orch_addr: SocketAddr,
    /// Containers created at startup if missing.
    pub containers: Vec<String>,
    pub max_concurrent_runs: usize,
    pub run_timeout_secs: u64,
    /// Interval of the real-time scheduler tick.
    pub tick_ms: u64,
    pub fsync: bool,
    pub fake_clock: bool,
    pub fake_clock_start: DateTime<Utc>,
    pub store: StoreSection,
    pub pool: PoolConfig,
    /// Infer auth keys by name.
    pub secrets: HashMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreSection {
    pub max_blob_bytes: u64,
    /// Enables `X-Simulated-Latency-Ms` and `latency_ms`.
    pub test_mode: bool,
    pub latency_ms: u64,
}

impl Default for StoreSection {
    fn default() -> Self {
        let base = StoreConfig::new("");
        Self {
            max_blob_bytes: base.max_blob_bytes,
            test_mode: false,
            latency_ms: 0,
        }
    }
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("bloompipe-data"),
            store_addr: ([127, 0, 0, 1], 7070).into(),
            orch_addr: ([127, 0, 0, 1], 7071).into(),
            containers: vec!["batch".into(), "stream".into(), "output".into()],
            max_concurrent_runs: DEFAULT_MAX_CONCURRENT_RUNS,
            run_timeout_secs: 120,
            tick_ms: 1000,
            fsync: true,
            fake_clock: false,
            fake_clock_start: DateTime::parse_from_rfc3339("2021-07-14T00:00:00Z")
                .expect("valid timestamp")
                .with_timezone(&Utc),
            store: StoreSection::default(),
            pool: PoolConfig::default(),
            secrets: HashMap::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot read config {path}: {source}")]
    ReadConfig { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path).map_err(|source| ServiceError::ReadConfig {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Applies `PIPE_FAKE_CLOCK=1`.
    pub fn with_env(mut self) -> Self {
        if std::env::var(FAKE_CLOCK_ENV).is_ok_and(|v| v == "1" || v.eq_ignore_ascii_case("true")) {
            self.fake_clock = true;
        }
        self
    }
}

pub struct Service {
    pub store_url: String,
    pub orch_url: String,
    pub store: Arc<BlobStore>,
    pub bus: Arc<EventBus>,
    pub orchestrator: Orchestrator,
    pub triggers: TriggerEngine,
    pub fake_clock: Option<Arc<FakeClock>>,
    stop: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl Service {
    /// Starts the service on the current tokio runtime. Listen ports may be
    /// 0; the bound URLs are reported in `store_url` and `orch_url`.
    pub async fn start(cfg: ServiceConfig) -> Result<Self, ServiceError> {
        cfg.pool.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        if cfg.tick_ms == 0 {
            return Err(ServiceError::Config("tick_ms must be positive".into()));
        }
        std::fs::create_dir_all(&cfg.data_dir)?;
        let (clock, fake_clock): (Arc<dyn Clock>, _) = if cfg.fake_clock {
            let fake = Arc::new(FakeClock::new(cfg.fake_clock_start));
            (fake.clone(), Some(fake))
        } else {
            (Arc::new(SystemClock), None)
        };

        let mut store_cfg = StoreConfig::new(cfg.data_dir.join("blobs"));
        store_cfg.max_blob_bytes = cfg.store.max_blob_bytes;
        store_cfg.fsync = cfg.fsync;
        let store = Arc::new(BlobStore::open(store_cfg)?);
        let bus = Arc::new(EventBus::new(BusConfig::default()));
        store.set_event_sink(bus.clone());
        for c in &cfg.containers {
            if !store.container_exists(c) {
                store.create_container(c)?;
            }
        }

        let pool = Arc::new(
            ComputePool::new(cfg.pool.clone(), clock.clone()).map_err(|e| ServiceError::Config(e.to_string()))?,
        );
        let state_dir = cfg.data_dir.join("state");
        let orchestrator = Orchestrator::open(
            OrchestratorConfig {
                data_dir: Some(state_dir.clone()),
                max_concurrent_runs: cfg.max_concurrent_runs,
                run_timeout: Duration::from_secs(cfg.run_timeout_secs),
                secrets: cfg.secrets.clone(),
                fsync: cfg.fsync,
            },
            store.clone(),
            pool.clone(),
            clock.clone(),
            tokio::runtime::Handle::current(),
        )
        .map_err(|e| ServiceError::Config(e.to_string()))?;
        let triggers = TriggerEngine::new(
            Arc::new(orchestrator.clone()),
            bus.clone(),
            store.clone(),
            clock.clone(),
            Some(&state_dir),
        )?;

        let (stop, stop_rx) = watch::channel(false);
        let mut tasks = Vec::new();

        let store_listener = bind(cfg.store_addr).await?;
        let store_url = format!("http://{}", store_listener.local_addr()?);
        let store_app = bloompipe_store::http::router(
            store.clone(),
            StoreHttpConfig {
                test_mode: cfg.store.test_mode,
                latency: Duration::from_millis(cfg.store.latency_ms),
            },
            Arc::new(RequestStats::default()),
        );
        tasks.push(serve(store_listener, store_app, stop_rx.clone()));

        let orch_listener = bind(cfg.orch_addr).await?;
        let orch_url = format!("http://{}", orch_listener.local_addr()?);
        let orch_app = http::router(ApiState {
            orchestrator: orchestrator.clone(),
            triggers: triggers.clone(),
            bus: bus.clone(),
            fake_clock: fake_clock.clone(),
        });
        tasks.push(serve(orch_listener, orch_app, stop_rx.clone()));

        if fake_clock.is_none() {
            tasks.push(tokio::spawn(ticker(
                triggers.clone(),
                pool,
                clock,
                Duration::from_millis(cfg.tick_ms),
                stop_rx,
            )));
        }

        Ok(Self {
            store_url,
            orch_url,
            store,
            bus,
            orchestrator,
            triggers,
            fake_clock,
            stop,
            tasks,
        })
    }

    pub async fn shutdown(self) {
        let _ = self.stop.send(true);
        for t in self.tasks {
            let _ = t.await;
        }
    }
}

async fn bind(addr: SocketAddr) -> Result<tokio::net::TcpListener, ServiceError> {
    tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServiceError::Bind { addr, source })
}

fn serve(listener: tokio::net::TcpListener, app: axum::Router, mut stop: watch::Receiver<bool>) -> JoinHandle<()> {
    tokio::spawn(async move {
        let shutdown = async move {
            let _ = stop.wait_for(|s| *s).await;
        };
        if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
            tracing::error!(error = %e, "http server failed");
        }
    })
}

async fn ticker(
    triggers: TriggerEngine,
    pool: Arc<ComputePool>,
    clock: Arc<dyn Clock>,
    every: Duration,
    mut stop: watch::Receiver<bool>,
) {
    let mut interval = tokio::time::interval(every);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    loop {
        tokio::select! {
            _ = interval.tick() => {}
            _ = stop.wait_for(|s| *s) => return,
        }
        let (t, p, c) = (triggers.clone(), pool.clone(), clock.clone());
        let _ = tokio::task::spawn_blocking(move || {
            let now = c.now();
            for fire in t.tick(now) {
                tracing::info!(trigger = %fire.trigger, runs = fire.run_ids.len(), "schedule fired");
            }
            p.tick_idle(now);
        })
        .await;
    }
}
