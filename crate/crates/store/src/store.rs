use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::blob::{validate_container_name, validate_path, Blob, BlobEvent, BlobMeta, EventKind};

pub const DEFAULT_MAX_BLOB_BYTES: u64 = 64 * 1024 * 1024;

const META_DIR: &str = ".meta";
const TMP_DIR: &str = ".tmp";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("unknown container {0}")]
    UnknownContainer(String),
    #[error("container {0} already exists")]
    AlreadyExists(String),
    #[error("invalid container name {0:?}")]
    InvalidName(String),
    #[error("invalid path {0}")]
    InvalidPath(String),
    #[error("blob {container}/{path} not found")]
    NotFound { container: String, path: String },
    #[error("blob of {size} bytes exceeds the {limit}-byte limit")]
    TooLarge { size: u64, limit: u64 },
    #[error("storage failure: {0}")]
    StorageFailure(String),
}

impl StoreError {
    /// Stable error code used in REST responses.
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::UnknownContainer(_) => "UnknownContainer",
            StoreError::AlreadyExists(_) => "AlreadyExists",
            StoreError::InvalidName(_) => "InvalidName",
            StoreError::InvalidPath(_) => "InvalidPath",
            StoreError::NotFound { .. } => "NotFound",
            StoreError::TooLarge { .. } => "TooLarge",
            StoreError::StorageFailure(_) => "StorageFailure",
        }
    }
}

fn io_err(context: &str, path: &Path) -> impl FnOnce(std::io::Error) -> StoreError {
    let what = format!("{context} {}", path.display());
    move |e| StoreError::StorageFailure(format!("{what}: {e}"))
}

/// Receiver of blob lifecycle events.
pub trait EventSink: Send + Sync {
    /// Returns the number of subscribers the event was routed to.
    fn publish(&self, event: BlobEvent) -> usize;
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub root: PathBuf,
    pub max_blob_bytes: u64,
    /// fsync blob data before the rename that publishes it.
    pub fsync: bool,
}

impl StoreConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            max_blob_bytes: DEFAULT_MAX_BLOB_BYTES,
            fsync: true,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum LogRecord {
    Put {
        path: String,
        size: u64,
        version: u64,
        content_type: String,
        created_at: DateTime<Utc>,
    },
    Delete {
        path: String,
        version: u64,
    },
}

struct Container {
    dir: PathBuf,
    index: RwLock<BTreeMap<String, BlobMeta>>,
    /// Highest version ever written per path, surviving deletes.
    versions: Mutex<HashMap<String, u64>>,
    log: Mutex<File>,
    path_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Container {
    fn path_lock(&self, path: &str) -> Arc<Mutex<()>> {
        self.path_locks.lock().entry(path.to_string()).or_default().clone()
    }

    fn append(&self, rec: &LogRecord) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(rec).expect("log record serializes");
        line.push(b'\n');
        let mut log = self.log.lock();
        log.write_all(&line)
            .and_then(|_| log.flush())
            .map_err(|e| StoreError::StorageFailure(format!("append metadata log: {e}")))
    }
}

/// Filesystem-backed blob store.
///
/// Writes go to a temp file and are renamed into place, so readers never see
/// a torn blob. Writes to one path are serialized; different paths proceed in
/// parallel. The event for a write is published only after the blob is
/// readable.
pub struct BlobStore {
    cfg: StoreConfig,
    containers: RwLock<HashMap<String, Arc<Container>>>,
    sink: RwLock<Option<Arc<dyn EventSink>>>,
}

impl BlobStore {
    /// Opens (or initializes) a store at `cfg.root`, replaying container logs.
    pub fn open(cfg: StoreConfig) -> Result<Self, StoreError> {
        let meta = cfg.root.join(META_DIR);
        fs::create_dir_all(&meta).map_err(io_err("create", &meta))?;
        let tmp = cfg.root.join(TMP_DIR);
        fs::create_dir_all(&tmp).map_err(io_err("create", &tmp))?;
        // leftovers from interrupted writes
        if let Ok(entries) = fs::read_dir(&tmp) {
            for e in entries.flatten() {
                let _ = fs::remove_file(e.path());
            }
        }
        let store = Self {
            cfg,
            containers: RwLock::new(HashMap::new()),
            sink: RwLock::new(None),
        };
        let mut names: Vec<String> = fs::read_dir(&meta)
            .map_err(io_err("read", &meta))?
            .flatten()
            .filter_map(|e| {
                let p = e.path();
                (p.extension()? == "jsonl").then(|| p.file_stem()?.to_str().map(str::to_string))?
            })
            .collect();
        names.sort();
        for name in names {
            let c = store.load_container(&name)?;
            store.containers.write().insert(name, Arc::new(c));
        }
        Ok(store)
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    pub fn set_event_sink(&self, sink: Arc<dyn EventSink>) {
        *self.sink.write() = Some(sink);
    }

    fn log_path(&self, name: &str) -> PathBuf {
        self.cfg.root.join(META_DIR).join(format!("{name}.jsonl"))
    }

    fn load_container(&self, name: &str) -> Result<Container, StoreError> {
        let log_path = self.log_path(name);
        let mut index = BTreeMap::new();
        let mut versions = HashMap::new();
        let reader = BufReader::new(File::open(&log_path).map_err(io_err("open", &log_path))?);
        for line in reader.lines() {
            let line = line.map_err(io_err("read", &log_path))?;
            // a torn final line from a crash is skipped
            let Ok(rec) = serde_json::from_str::<LogRecord>(&line) else {
                tracing::warn!(container = name, "skipping unreadable metadata record");
                continue;
            };
            match rec {
                LogRecord::Put {
                    path,
                    size,
                    version,
                    content_type,
                    created_at,
                } => {
                    versions.insert(path.clone(), version);
                    index.insert(
                        path.clone(),
                        BlobMeta {
                            path,
                            size,
                            version,
                            content_type,
                            created_at,
                        },
                    );
                }
                LogRecord::Delete { path, .. } => {
                    index.remove(&path);
                }
            }
        }
        let dir = self.cfg.root.join(name);
        fs::create_dir_all(&dir).map_err(io_err("create", &dir))?;
        let log = OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(io_err("open", &log_path))?;
        Ok(Container {
            dir,
            index: RwLock::new(index),
            versions: Mutex::new(versions),
            log: Mutex::new(log),
            path_locks: Mutex::new(HashMap::new()),
        })
    }

    fn container(&self, name: &str) -> Result<Arc<Container>, StoreError> {
        self.containers
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| StoreError::UnknownContainer(name.to_string()))
    }

    pub fn create_container(&self, name: &str) -> Result<(), StoreError> {
        validate_container_name(name)?;
        let mut containers = self.containers.write();
        if containers.contains_key(name) {
            return Err(StoreError::AlreadyExists(name.to_string()));
        }
        let log_path = self.log_path(name);
        File::create(&log_path).map_err(io_err("create", &log_path))?;
        let c = self.load_container(name)?;
        containers.insert(name.to_string(), Arc::new(c));
        Ok(())
    }

    pub fn list_containers(&self) -> Vec<String> {
        let mut names: Vec<String> = self.containers.read().keys().cloned().collect();
        names.sort();
        names
    }

    pub fn container_exists(&self, name: &str) -> bool {
        self.containers.read().contains_key(name)
    }

    pub fn put_blob(&self, container: &str, path: &str, bytes: &[u8], content_type: &str) -> Result<Blob, StoreError> {
        validate_path(path)?;
        let size = bytes.len() as u64;
        if size > self.cfg.max_blob_bytes {
            return Err(StoreError::TooLarge {
                size,
                limit: self.cfg.max_blob_bytes,
            });
        }
        let c = self.container(container)?;
        let lock = c.path_lock(path);
        let _guard = lock.lock();

        let target = c.dir.join(path);
        let tmp = self.cfg.root.join(TMP_DIR).join(uuid::Uuid::new_v4().to_string());
        let write = || -> std::io::Result<()> {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            if self.cfg.fsync {
                f.sync_data()?;
            }
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::rename(&tmp, &target)
        };
        if let Err(e) = write() {
            let _ = fs::remove_file(&tmp);
            return Err(StoreError::StorageFailure(format!("write {}: {e}", target.display())));
        }

        let version = {
            let mut versions = c.versions.lock();
            let v = versions.entry(path.to_string()).or_insert(0);
            *v += 1;
            *v
        };
        let created_at = Utc::now();
        c.append(&LogRecord::Put {
            path: path.to_string(),
            size,
            version,
            content_type: content_type.to_string(),
            created_at,
        })?;
        c.index.write().insert(
            path.to_string(),
            BlobMeta {
                path: path.to_string(),
                size,
                version,
                content_type: content_type.to_string(),
                created_at,
            },
        );
        self.emit(BlobEvent::new(EventKind::BlobCreated, container, path, size, version));
        Ok(Blob {
            container: container.to_string(),
            path: path.to_string(),
            bytes: bytes.to_vec(),
            content_type: content_type.to_string(),
            size,
            created_at,
            version,
        })
    }

    fn emit(&self, event: BlobEvent) {
        let sink = self.sink.read().clone();
        if let Some(sink) = sink {
            sink.publish(event);
        }
    }

    pub fn head_blob(&self, container: &str, path: &str) -> Result<BlobMeta, StoreError> {
        let c = self.container(container)?;
        let meta = c.index.read().get(path).cloned();
        meta.ok_or_else(|| StoreError::NotFound {
            container: container.to_string(),
            path: path.to_string(),
        })
    }

    pub fn get_blob(&self, container: &str, path: &str) -> Result<Blob, StoreError> {
        validate_path(path)?;
        let c = self.container(container)?;
        // Optimistic read: metadata, bytes, then confirm no overwrite slipped in.
        loop {
            let meta = self.head_blob(container, path)?;
            let file = c.dir.join(path);
            let bytes = match fs::read(&file) {
                Ok(b) => b,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    // deleted between the index read and the file read
                    if self.head_blob(container, path).is_err() {
                        return Err(StoreError::NotFound {
                            container: container.to_string(),
                            path: path.to_string(),
                        });
                    }
                    continue;
                }
                Err(e) => return Err(io_err("read", &file)(e)),
            };
            let after = self.head_blob(container, path)?;
            if after.version == meta.version && bytes.len() as u64 == meta.size {
                return Ok(Blob {
                    container: container.to_string(),
                    path: path.to_string(),
                    bytes,
                    content_type: meta.content_type,
                    size: meta.size,
                    created_at: meta.created_at,
                    version: meta.version,
                });
            }
        }
    }

    /// Blobs whose path starts with `prefix`, ordered by path.
    pub fn list_blobs(&self, container: &str, prefix: &str) -> Result<Vec<BlobMeta>, StoreError> {
        let c = self.container(container)?;
        let index = c.index.read();
        Ok(index
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect())
    }

    pub fn delete_blob(&self, container: &str, path: &str) -> Result<(), StoreError> {
        validate_path(path)?;
        let c = self.container(container)?;
        let lock = c.path_lock(path);
        let _guard = lock.lock();
        let Some(meta) = c.index.read().get(path).cloned() else {
            return Err(StoreError::NotFound {
                container: container.to_string(),
                path: path.to_string(),
            });
        };
        let file = c.dir.join(path);
        match fs::remove_file(&file) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(io_err("remove", &file)(e)),
        }
        // prune now-empty parent directories up to the container root
        let mut dir = file.parent();
        while let Some(d) = dir {
            if d == c.dir || fs::remove_dir(d).is_err() {
                break;
            }
            dir = d.parent();
        }
        c.append(&LogRecord::Delete {
            path: path.to_string(),
            version: meta.version,
        })?;
        c.index.write().remove(path);
        self.emit(BlobEvent::new(
            EventKind::BlobDeleted,
            container,
            path,
            meta.size,
            meta.version,
        ));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[derive(Default)]
    struct Recorder {
        events: Mutex<Vec<BlobEvent>>,
        created: AtomicUsize,
    }

    impl EventSink for Recorder {
        fn publish(&self, event: BlobEvent) -> usize {
            if event.kind == EventKind::BlobCreated {
                self.created.fetch_add(1, Ordering::SeqCst);
            }
            self.events.lock().push(event);
            1
        }
    }

    fn store() -> (tempfile::TempDir, BlobStore, Arc<Recorder>) {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = StoreConfig::new(dir.path());
        cfg.fsync = false;
        let s = BlobStore::open(cfg).unwrap();
        let rec = Arc::new(Recorder::default());
        s.set_event_sink(rec.clone());
        (dir, s, rec)
    }

    #[test]
    fn put_get_and_overwrite() {
        let (_d, s, rec) = store();
        s.create_container("stream").unwrap();
        let body = vec![7u8; 157_600];
        let b = s.put_blob("stream", "imgs/a.jpg", &body, "image/jpeg").unwrap();
        assert_eq!((b.size, b.version), (157_600, 1));
        assert_eq!(s.get_blob("stream", "imgs/a.jpg").unwrap().bytes, body);
        let b2 = s.put_blob("stream", "imgs/a.jpg", b"v2", "image/jpeg").unwrap();
        assert_eq!(b2.version, 2);
        assert_eq!(s.get_blob("stream", "imgs/a.jpg").unwrap().bytes, b"v2");
        assert_eq!(rec.created.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn errors() {
        let (_d, s, rec) = store();
        s.create_container("batch").unwrap();
        assert!(matches!(s.create_container("batch"), Err(StoreError::AlreadyExists(_))));
        assert!(matches!(s.create_container("B!"), Err(StoreError::InvalidName(_))));
        assert!(matches!(
            s.get_blob("batch", "missing.jpg"),
            Err(StoreError::NotFound { .. })
        ));
        assert!(matches!(
            s.put_blob("nope", "a", b"x", "x"),
            Err(StoreError::UnknownContainer(_))
        ));
        assert!(matches!(
            s.put_blob("batch", "../a", b"x", "x"),
            Err(StoreError::InvalidPath(_))
        ));
        assert!(matches!(
            s.delete_blob("batch", "missing"),
            Err(StoreError::NotFound { .. })
        ));
        assert!(matches!(s.list_blobs("nope", ""), Err(StoreError::UnknownContainer(_))));
        assert!(rec.events.lock().is_empty());
    }

    #[test]
    fn size_cap() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = StoreConfig::new(dir.path());
        cfg.max_blob_bytes = 10;
        let s = BlobStore::open(cfg).unwrap();
        s.create_container("batch").unwrap();
        assert!(matches!(
            s.put_blob("batch", "a", &[0; 11], "x"),
            Err(StoreError::TooLarge { .. })
        ));
        assert!(s.put_blob("batch", "a", &[0; 10], "x").is_ok());
    }

    #[test]
    fn listing_is_sorted_and_prefixed() {
        let (_d, s, _) = store();
        s.create_container("batch").unwrap();
        assert!(s.list_blobs("batch", "").unwrap().is_empty());
        for p in ["july14/b.jpg", "july08/z.jpg", "july08/a.jpg"] {
            s.put_blob("batch", p, p.as_bytes(), "image/jpeg").unwrap();
        }
        let all: Vec<String> = s.list_blobs("batch", "").unwrap().into_iter().map(|m| m.path).collect();
        assert_eq!(all, vec!["july08/a.jpg", "july08/z.jpg", "july14/b.jpg"]);
        let pre: Vec<String> = s
            .list_blobs("batch", "july08/")
            .unwrap()
            .into_iter()
            .map(|m| m.path)
            .collect();
        assert_eq!(pre, vec!["july08/a.jpg", "july08/z.jpg"]);
    }

    #[test]
    fn delete_emits_once_and_version_keeps_growing() {
        let (_d, s, rec) = store();
        s.create_container("batch").unwrap();
        s.put_blob("batch", "a/b.jpg", b"1", "x").unwrap();
        s.delete_blob("batch", "a/b.jpg").unwrap();
        assert!(matches!(
            s.get_blob("batch", "a/b.jpg"),
            Err(StoreError::NotFound { .. })
        ));
        let kinds: Vec<EventKind> = rec.events.lock().iter().map(|e| e.kind).collect();
        assert_eq!(kinds, vec![EventKind::BlobCreated, EventKind::BlobDeleted]);
        // the emptied directory is pruned, so `a` can now be a blob
        s.put_blob("batch", "a", b"2", "x").unwrap();
        assert!(s.put_blob("batch", "a/b.jpg", b"3", "x").is_err());
        s.delete_blob("batch", "a").unwrap();
        assert_eq!(s.put_blob("batch", "a/b.jpg", b"3", "x").unwrap().version, 2);
    }

    #[test]
    fn reopen_replays_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = StoreConfig::new(dir.path());
        {
            let s = BlobStore::open(cfg.clone()).unwrap();
            s.create_container("batch").unwrap();
            s.put_blob("batch", "x.jpg", b"one", "image/jpeg").unwrap();
            s.put_blob("batch", "x.jpg", b"two", "image/jpeg").unwrap();
            s.put_blob("batch", "y.jpg", b"gone", "image/jpeg").unwrap();
            s.delete_blob("batch", "y.jpg").unwrap();
        }
        let s = BlobStore::open(cfg).unwrap();
        let b = s.get_blob("batch", "x.jpg").unwrap();
        assert_eq!((b.bytes.as_slice(), b.version), (&b"two"[..], 2));
        assert!(s.get_blob("batch", "y.jpg").is_err());
        assert_eq!(s.put_blob("batch", "x.jpg", b"3", "x").unwrap().version, 3);
        assert_eq!(s.list_containers(), vec!["batch".to_string()]);
    }

    #[test]
    fn concurrent_same_path_puts_are_atomic() {
        let (_d, s, rec) = store();
        let s = Arc::new(s);
        s.create_container("batch").unwrap();
        let a = vec![b'a'; 200_000];
        let b = vec![b'b'; 200_000];
        let handles: Vec<_> = [a.clone(), b.clone()]
            .into_iter()
            .map(|body| {
                let s = s.clone();
                std::thread::spawn(move || s.put_blob("batch", "same.bin", &body, "x").unwrap().version)
            })
            .collect();
        let mut versions: Vec<u64> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        versions.sort();
        assert_eq!(versions, vec![1, 2]);
        let got = s.get_blob("batch", "same.bin").unwrap().bytes;
        assert!(got == a || got == b);
        assert_eq!(rec.created.load(Ordering::SeqCst), 2);
    }
}
