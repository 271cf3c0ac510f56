//! Uploading a local directory of files into a store container.
//!
//! Sync mode uploads one file at a time in filename order. Async mode keeps
//! at most `concurrency` uploads in flight, in no particular order.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::client::{ClientError, StoreClient};

pub const DEFAULT_CONCURRENCY: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sync,
    Async,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestPlan {
    pub mode: Mode,
    /// Upper bound on uploads in flight; async mode only.
    pub concurrency: usize,
    pub source_dir: PathBuf,
    pub container: String,
    /// Prepended to each file name to form the blob path.
    pub prefix: String,
    /// Asks a store in test mode to delay each request.
    pub simulated_latency_ms: Option<u64>,
}

impl IngestPlan {
    pub fn new(mode: Mode, source_dir: impl Into<PathBuf>, container: impl Into<String>) -> Self {
        Self {
            mode,
            concurrency: DEFAULT_CONCURRENCY,
            source_dir: source_dir.into(),
            container: container.into(),
            prefix: String::new(),
            simulated_latency_ms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status")]
pub enum FileStatus {
    Succeeded { version: u64 },
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileResult {
    pub file: String,
    pub path: String,
    pub bytes: u64,
    #[serde(flatten)]
    pub status: FileStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub mode: Mode,
    pub container: String,
    pub files: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub bytes: u64,
    pub wall_time_s: f64,
    pub results: Vec<FileResult>,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("concurrency must be at least 1")]
    BadConcurrency,
    #[error("cannot read {}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{} contains no files", .0.display())]
    NoFiles(PathBuf),
    #[error("UnknownContainer: {0}")]
    UnknownContainer(String),
    #[error("StoreUnreachable: {0}")]
    StoreUnreachable(String),
    #[error("{0}")]
    Store(ClientError),
}

/// Regular files directly inside `dir`, sorted by name.
pub fn source_files(dir: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let read_err = |source| IngestError::Read {
        path: dir.to_path_buf(),
        source,
    };
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(read_err)? {
        let entry = entry.map_err(read_err)?;
        if entry.file_type().map_err(read_err)?.is_file() {
            files.push(entry.path());
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(IngestError::NoFiles(dir.to_path_buf()));
    }
    Ok(files)
}

pub fn content_type_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("png") => "image/png",
        Some("json") => "application/json",
        Some("txt") => "text/plain",
        _ => "application/octet-stream",
    }
}

/// Fails early if the store is down or the container is missing.
pub async fn preflight(store: &StoreClient, container: &str) -> Result<(), IngestError> {
    match store.list_containers().await {
        Ok(names) if names.iter().any(|n| n == container) => Ok(()),
        Ok(_) => Err(IngestError::UnknownContainer(container.to_string())),
        Err(ClientError::Unreachable { reason, .. }) => Err(IngestError::StoreUnreachable(reason)),
        Err(e) => Err(IngestError::Store(e)),
    }
}

async fn upload(store: &StoreClient, plan: &IngestPlan, file: &Path) -> FileResult {
    let name = file
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let path = format!("{}{}", plan.prefix, name);
    let bytes = match tokio::task::spawn_blocking({
        let file = file.to_path_buf();
        move || std::fs::read(file)
    })
    .await
    .expect("file read task")
    {
        Ok(b) => b,
        Err(e) => {
            return FileResult {
                file: name,
                path,
                bytes: 0,
                status: FileStatus::Failed { reason: e.to_string() },
            }
        }
    };
    let size = bytes.len() as u64;
    let status = match store
        .put_blob(
            &plan.container,
            &path,
            bytes,
            content_type_for(file),
            plan.simulated_latency_ms,
        )
        .await
    {
        Ok(r) => FileStatus::Succeeded { version: r.version },
        Err(e) => FileStatus::Failed { reason: e.to_string() },
    };
    FileResult {
        file: name,
        path,
        bytes: size,
        status,
    }
}

pub async fn ingest(store: &StoreClient, plan: &IngestPlan) -> Result<IngestSummary, IngestError> {
    if plan.concurrency == 0 {
        return Err(IngestError::BadConcurrency);
    }
    let files = source_files(&plan.source_dir)?;
    preflight(store, &plan.container).await?;
    let started = Instant::now();
    let results = match plan.mode {
        Mode::Sync => {
            let mut out = Vec::with_capacity(files.len());
            for f in &files {
                out.push(upload(store, plan, f).await);
            }
            out
        }
        Mode::Async => {
            let permits = Arc::new(Semaphore::new(plan.concurrency));
            let plan = Arc::new(plan.clone());
            let mut tasks = tokio::task::JoinSet::new();
            for (i, f) in files.iter().cloned().enumerate() {
                let (permits, plan, store) = (permits.clone(), plan.clone(), store.clone());
                tasks.spawn(async move {
                    let _permit = permits.acquire_owned().await.expect("semaphore open");
                    (i, upload(&store, &plan, &f).await)
                });
            }
            let mut out: Vec<Option<FileResult>> = vec![None; files.len()];
            while let Some(done) = tasks.join_next().await {
                let (i, r) = done.expect("upload task");
                out[i] = Some(r);
            }
            out.into_iter().map(|r| r.expect("every file reported")).collect()
        }
    };
    Ok(summarize(plan, results, started.elapsed()))
}

fn summarize(plan: &IngestPlan, results: Vec<FileResult>, wall: Duration) -> IngestSummary {
    let succeeded = results
        .iter()
        .filter(|r| matches!(r.status, FileStatus::Succeeded { .. }))
        .count();
    IngestSummary {
        mode: plan.mode,
        container: plan.container.clone(),
        files: results.len(),
        succeeded,
        failed: results.len() - succeeded,
        bytes: results.iter().map(|r| r.bytes).sum(),
        wall_time_s: wall.as_secs_f64(),
        results,
    }
}
