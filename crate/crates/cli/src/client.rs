//! Thin HTTP clients for the store and orchestrator APIs.

use std::time::Duration;

use reqwest::{Method, StatusCode, Url};
use serde::Deserialize;
use serde_json::Value;

pub const LATENCY_HEADER: &str = "x-simulated-latency-ms";

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("invalid URL {0}")]
    BadUrl(String),
    /// A path segment that URL normalization would rewrite.
    #[error("InvalidPath: {0}")]
    InvalidPath(String),
    #[error("cannot reach {url}: {reason}")]
    Unreachable { url: String, reason: String },
    #[error("{status}: {}", describe(body))]
    Http { status: u16, body: Value },
    #[error("unexpected response from {url}: {reason}")]
    Decode { url: String, reason: String },
}

fn describe(body: &Value) -> String {
    match (body["error"].as_str(), body["message"].as_str()) {
        (Some(code), Some(msg)) if msg.starts_with(code) => msg.to_string(),
        (Some(code), Some(msg)) => format!("{code}: {msg}"),
        (Some(code), None) => code.to_string(),
        _ => body.to_string(),
    }
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Http { status, .. } => Some(*status),
            _ => None,
        }
    }

    /// The `error` code of a JSON error body.
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Http { body, .. } => body["error"].as_str(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
struct Base {
    url: Url,
    http: reqwest::Client,
}

impl Base {
    fn new(base: &str, http: reqwest::Client) -> Result<Self, ClientError> {
        let url = Url::parse(base.trim_end_matches('/')).map_err(|_| ClientError::BadUrl(base.to_string()))?;
        if url.cannot_be_a_base() {
            return Err(ClientError::BadUrl(base.to_string()));
        }
        Ok(Self { url, http })
    }

    fn url(&self, segments: &[&str]) -> Result<Url, ClientError> {
        let parts: Vec<&str> = segments.iter().flat_map(|s| s.split('/')).collect();
        if parts.iter().any(|p| p.is_empty() || *p == "." || *p == "..") {
            return Err(ClientError::InvalidPath(segments.join("/")));
        }
        let mut url = self.url.clone();
        url.path_segments_mut()
            .expect("checked base URL")
            .pop_if_empty()
            .extend(parts);
        Ok(url)
    }

    async fn send(&self, req: reqwest::RequestBuilder, url: &Url) -> Result<reqwest::Response, ClientError> {
        let resp = req.send().await.map_err(|e| ClientError::Unreachable {
            url: url.to_string(),
            reason: e.to_string(),
        })?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status().as_u16();
        let bytes = resp.bytes().await.unwrap_or_default();
        let body = serde_json::from_slice(&bytes)
            .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into_owned()));
        Err(ClientError::Http { status, body })
    }

    async fn json(&self, method: Method, url: Url, body: Option<&Value>) -> Result<Value, ClientError> {
        let mut req = self.http.request(method, url.clone());
        if let Some(b) = body {
            req = req.header("content-type", "application/json").body(b.to_string());
        }
        let resp = self.send(req, &url).await?;
        if resp.status() == StatusCode::NO_CONTENT {
            return Ok(Value::Null);
        }
        let bytes = resp.bytes().await.map_err(|e| ClientError::Decode {
            url: url.to_string(),
            reason: e.to_string(),
        })?;
        if bytes.is_empty() {
            return Ok(Value::Null);
        }
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode {
            url: url.to_string(),
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct PutResult {
    pub container: String,
    pub path: String,
    pub size: u64,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct StoreStats {
    pub in_flight: usize,
    pub max_in_flight: usize,
    pub requests: u64,
}

#[derive(Debug, Clone)]
pub struct StoreClient {
    base: Base,
}

impl StoreClient {
    pub fn new(base_url: &str) -> Result<Self, ClientError> {
        let http = reqwest::Client::builder()
            .pool_max_idle_per_host(256)
            .connect_timeout(Duration::from_secs(5))
            .build()
            .expect("http client");
        Ok(Self {
            base: Base::new(base_url, http)?,
        })
    }

    pub async fn create_container(&self, name: &str) -> Result<(), ClientError> {
        let url = self.base.url(&["v1", "containers"])?;
        self.base
            .json(Method::POST, url, Some(&serde_json::json!({"name": name})))
            .await
            .map(|_| ())
    }

    pub async fn list_containers(&self) -> Result<Vec<String>, ClientError> {
        let url = self.base.url(&["v1", "containers"])?;
        let v = self.base.json(Method::GET, url.clone(), None).await?;
        decode(v, &url)
    }

    pub async fn put_blob(
        &self,
        container: &str,
        path: &str,
        bytes: Vec<u8>,
        content_type: &str,
        simulated_latency_ms: Option<u64>,
    ) -> Result<PutResult, ClientError> {
        let url = self.base.url(&["v1", "containers", container, "blobs", path])?;
        let mut req = self
            .base
            .http
            .put(url.clone())
            .header("content-type", content_type)
            .body(bytes);
        if let Some(ms) = simulated_latency_ms {
            req = req.header(LATENCY_HEADER, ms);
        }
        let resp = self.base.send(req, &url).await?;
        let bytes = resp.bytes().await.map_err(|e| ClientError::Decode {
            url: url.to_string(),
            reason: e.to_string(),
        })?;
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode {
            url: url.to_string(),
            reason: e.to_string(),
        })
    }

    pub async fn get_blob(&self, container: &str, path: &str) -> Result<Vec<u8>, ClientError> {
        let url = self.base.url(&["v1", "containers", container, "blobs", path])?;
        let resp = self.base.send(self.base.http.get(url.clone()), &url).await?;
        resp.bytes().await.map(|b| b.to_vec()).map_err(|e| ClientError::Decode {
            url: url.to_string(),
            reason: e.to_string(),
        })
    }

    /// Blob listing entries as returned by the store.
    pub async fn list_blobs(&self, container: &str, prefix: &str) -> Result<Vec<Value>, ClientError> {
        let mut url = self.base.url(&["v1", "containers", container, "blobs"])?;
        if !prefix.is_empty() {
            url.query_pairs_mut().append_pair("prefix", prefix);
        }
        let v = self.base.json(Method::GET, url.clone(), None).await?;
        decode(v, &url)
    }

    pub async fn delete_blob(&self, container: &str, path: &str) -> Result<(), ClientError> {
        let url = self.base.url(&["v1", "containers", container, "blobs", path])?;
        self.base.json(Method::DELETE, url, None).await.map(|_| ())
    }

    pub async fn stats(&self) -> Result<StoreStats, ClientError> {
        let url = self.base.url(&["v1", "stats"])?;
        let v = self.base.json(Method::GET, url.clone(), None).await?;
        decode(v, &url)
    }

    pub async fn reset_stats(&self) -> Result<(), ClientError> {
        let url = self.base.url(&["v1", "stats"])?;
        self.base.json(Method::DELETE, url, None).await.map(|_| ())
    }
}

fn decode<T: serde::de::DeserializeOwned>(v: Value, url: &Url) -> Result<T, ClientError> {
    serde_json::from_value(v).map_err(|e| ClientError::Decode {
        url: url.to_string(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone)]
pub struct OrchClient {
    base: Base,
}

impl OrchClient {
    pub fn new(base_url: &str) -> Result<Self, ClientError> {
        let http = reqwest::Client::builder()
            .connect_timeout(Duration::from_secs(5))
            .build()
            .expect("http client");
        Ok(Self {
            base: Base::new(base_url, http)?,
        })
    }

    pub async fn get(&self, segments: &[&str], query: &[(&str, String)]) -> Result<Value, ClientError> {
        let mut url = self.base.url(segments)?;
        if !query.is_empty() {
            let mut q = url.query_pairs_mut();
            for (k, v) in query {
                q.append_pair(k, v);
            }
        }
        self.base.json(Method::GET, url, None).await
    }

    pub async fn post(&self, segments: &[&str], body: &Value) -> Result<Value, ClientError> {
        let url = self.base.url(segments)?;
        self.base.json(Method::POST, url, Some(body)).await
    }
}

/// Posts an image to a detector's scoring endpoint and returns the raw JSON.
pub async fn score(detector_url: &str, key: &str, filename: &str, image: Vec<u8>) -> Result<Value, ClientError> {
    let base = Base::new(detector_url, reqwest::Client::new())?;
    let url = base.url(&["v1", "score"])?;
    let req = base
        .http
        .post(url.clone())
        .bearer_auth(key)
        .header("x-filename", filename)
        .header("content-type", "application/octet-stream")
        .body(image);
    let resp = base.send(req, &url).await?;
    let bytes = resp.bytes().await.map_err(|e| ClientError::Decode {
        url: url.to_string(),
        reason: e.to_string(),
    })?;
    serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode {
        url: url.to_string(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_paths_keep_their_slashes() {
        let b = Base::new("http://127.0.0.1:7070/", reqwest::Client::new()).unwrap();
        let url = b
            .url(&["v1", "containers", "stream", "blobs", "july14/f 001.jpg"])
            .unwrap();
        assert_eq!(
            url.as_str(),
            "http://127.0.0.1:7070/v1/containers/stream/blobs/july14/f%20001.jpg"
        );
        assert!(Base::new("not a url", reqwest::Client::new()).is_err());
        for bad in ["../a.jpg", "a/./b", "a//b", "a/"] {
            assert!(matches!(b.url(&["v1", bad]), Err(ClientError::InvalidPath(_))), "{bad}");
        }
    }

    #[test]
    fn error_descriptions() {
        let e = ClientError::Http {
            status: 404,
            body: serde_json::json!({"error": "UnknownContainer", "message": "UnknownContainer: nope"}),
        };
        assert_eq!(e.to_string(), "404: UnknownContainer: nope");
        assert_eq!(e.code(), Some("UnknownContainer"));
    }
}
