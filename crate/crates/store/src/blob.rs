use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::store::StoreError;

/// A stored object at one version.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blob {
    pub container: String,
    pub path: String,
    pub bytes: Vec<u8>,
    pub content_type: String,
    pub size: u64,
    pub created_at: DateTime<Utc>,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobMeta {
    pub path: String,
    pub size: u64,
    pub version: u64,
    pub content_type: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    BlobCreated,
    BlobDeleted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEvent {
    pub event_id: String,
    pub kind: EventKind,
    pub container: String,
    pub path: String,
    pub size: u64,
    /// Version written (created) or removed (deleted).
    pub version: u64,
    pub emitted_at: DateTime<Utc>,
}

impl BlobEvent {
    pub fn new(kind: EventKind, container: &str, path: &str, size: u64, version: u64) -> Self {
        Self {
            event_id: uuid::Uuid::new_v4().to_string(),
            kind,
            container: container.to_string(),
            path: path.to_string(),
            size,
            version,
            emitted_at: Utc::now(),
        }
    }
}

/// Container names: 3 to 63 characters from `[a-z0-9-]`.
pub fn validate_container_name(name: &str) -> Result<(), StoreError> {
    let ok = (3..=63).contains(&name.len())
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-');
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidName(name.to_string()))
    }
}

/// Blob paths are relative and slash-separated, with no empty, `.` or `..`
/// segments.
pub fn validate_path(path: &str) -> Result<(), StoreError> {
    let bad = |why: &str| Err(StoreError::InvalidPath(format!("{path:?}: {why}")));
    if path.is_empty() {
        return bad("empty path");
    }
    if path.starts_with('/') {
        return bad("leading slash");
    }
    if path.contains('\\') || path.contains('\0') {
        return bad("backslash or NUL");
    }
    for seg in path.split('/') {
        match seg {
            "" => return bad("empty segment"),
            "." | ".." => return bad("dot segment"),
            _ => {}
        }
    }
    Ok(())
}
