//! Sync versus async ingestion benchmark.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::client::StoreClient;
use crate::ingest::{ingest, IngestError, IngestPlan, IngestSummary, Mode};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchPlan {
    pub source_dir: PathBuf,
    pub container: String,
    pub prefix: String,
    pub concurrency: usize,
    pub simulated_latency_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTiming {
    pub wall_time_s: f64,
    pub files_per_s: f64,
    pub bytes_per_s: f64,
    pub failed: usize,
    /// Peak concurrent requests seen by the store, when it reports them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_in_flight: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub files: usize,
    pub total_bytes: u64,
    pub concurrency: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulated_latency_ms: Option<u64>,
    pub sync: ModeTiming,
    #[serde(rename = "async")]
    pub async_: ModeTiming,
    /// Sync wall time over async wall time.
    pub speedup: f64,
}

fn timing(s: &IngestSummary, max_in_flight: Option<usize>) -> ModeTiming {
    let wall = s.wall_time_s.max(f64::MIN_POSITIVE);
    ModeTiming {
        wall_time_s: s.wall_time_s,
        files_per_s: s.files as f64 / wall,
        bytes_per_s: s.bytes as f64 / wall,
        failed: s.failed,
        max_in_flight,
    }
}

/// Deletes every blob under `prefix` so both modes write from scratch.
async fn clean(store: &StoreClient, container: &str, prefix: &str) -> Result<(), IngestError> {
    let blobs = store.list_blobs(container, prefix).await.map_err(IngestError::Store)?;
    for b in blobs {
        if let Some(path) = b["path"].as_str() {
            store.delete_blob(container, path).await.map_err(IngestError::Store)?;
        }
    }
    Ok(())
}

async fn measured(store: &StoreClient, plan: &IngestPlan) -> Result<(IngestSummary, Option<usize>), IngestError> {
    clean(store, &plan.container, &plan.prefix).await?;
    let probe = store.reset_stats().await.is_ok();
    let summary = ingest(store, plan).await?;
    let peak = if probe {
        store.stats().await.ok().map(|s| s.max_in_flight)
    } else {
        None
    };
    Ok((summary, peak))
}

/// Runs sync then async ingestion of the same files. The async run's blobs
/// are left in place.
pub async fn bench_ingest(store: &StoreClient, plan: &BenchPlan) -> Result<BenchReport, IngestError> {
    let mut ingest_plan = IngestPlan::new(Mode::Sync, plan.source_dir.clone(), plan.container.clone());
    ingest_plan.prefix = plan.prefix.clone();
    ingest_plan.concurrency = plan.concurrency;
    ingest_plan.simulated_latency_ms = plan.simulated_latency_ms;
    let (sync, sync_peak) = measured(store, &ingest_plan).await?;
    ingest_plan.mode = Mode::Async;
    let (async_, async_peak) = measured(store, &ingest_plan).await?;
    Ok(BenchReport {
        files: sync.files,
        total_bytes: sync.bytes,
        concurrency: plan.concurrency,
        simulated_latency_ms: plan.simulated_latency_ms,
        sync: timing(&sync, sync_peak),
        async_: timing(&async_, async_peak),
        speedup: sync.wall_time_s / async_.wall_time_s.max(f64::MIN_POSITIVE),
    })
}
