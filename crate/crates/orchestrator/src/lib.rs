//! Pipeline orchestration for the bloom detection pipeline.

pub mod clock;
pub mod cron;
pub mod expr;
pub mod http;
pub mod orchestrator;
pub mod persist;
pub mod pipeline;
pub mod pool;
pub mod run;
pub mod service;
pub mod triggers;

pub use clock::{Clock, FakeClock, SystemClock};
pub use cron::{CronError, CronExpr};
pub use orchestrator::{ActivityError, ApplyError, Orchestrator, OrchestratorConfig, RunError};
pub use pipeline::PipelineDefinition;
pub use pool::{ComputePool, Phase, PoolConfig, PoolError, PoolState};
pub use run::{PipelineRun, RunFilter, RunStatus, TriggerSource};
pub use triggers::{FireContext, RunSink, TriggerEngine, TriggerError, TriggerKind, TriggerSpec, TriggerStatus};
