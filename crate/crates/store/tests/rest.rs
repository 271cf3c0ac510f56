use std::sync::Arc;
use std::time::{Duration, Instant};

use bloompipe_store::http::{router, RequestStats, StatsSnapshot, StoreHttpConfig, LATENCY_HEADER};
use bloompipe_store::{BlobStore, StoreConfig};
use reqwest::StatusCode;

async fn serve(cfg: StoreHttpConfig) -> (tempfile::TempDir, String, Arc<BlobStore>) {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = StoreConfig::new(dir.path());
    sc.fsync = false;
    sc.max_blob_bytes = 1024 * 1024;
    let store = Arc::new(BlobStore::open(sc).unwrap());
    let app = router(store.clone(), cfg, Arc::new(RequestStats::default()));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (dir, url, store)
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).unwrap()
}

#[tokio::test]
async fn container_and_blob_lifecycle() {
    let (_dir, url, _store) = serve(StoreHttpConfig::default()).await;
    let c = reqwest::Client::new();
    let mk = |name: &str| {
        c.post(format!("{url}/v1/containers"))
            .header("content-type", "application/json")
            .body(format!(r#"{{"name":"{name}"}}"#))
            .send()
    };
    assert_eq!(mk("batch").await.unwrap().status(), StatusCode::CREATED);
    assert_eq!(mk("stream").await.unwrap().status(), StatusCode::CREATED);
    assert_eq!(mk("batch").await.unwrap().status(), StatusCode::CONFLICT);
    assert_eq!(mk("B!").await.unwrap().status(), StatusCode::BAD_REQUEST);
    let names = json(
        &c.get(format!("{url}/v1/containers"))
            .send()
            .await
            .unwrap()
            .bytes()
            .await
            .unwrap(),
    );
    assert_eq!(names, serde_json::json!(["batch", "stream"]));

    let body = vec![1u8, 2, 3, 4, 5];
    let r = c
        .put(format!("{url}/v1/containers/stream/blobs/imgs/a.jpg"))
        .header("content-type", "image/jpeg")
        .body(body.clone())
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::CREATED);
    assert_eq!(
        json(&r.bytes().await.unwrap()),
        serde_json::json!({"container":"stream","path":"imgs/a.jpg","size":5,"version":1})
    );

    let r = c
        .get(format!("{url}/v1/containers/stream/blobs/imgs/a.jpg"))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(r.headers()["content-type"], "image/jpeg");
    assert_eq!(r.bytes().await.unwrap().to_vec(), body);

    let list = json(
        &c.get(format!("{url}/v1/containers/stream/blobs?prefix=imgs/"))
            .send()
            .await
            .unwrap()
            .bytes()
            .await
            .unwrap(),
    );
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["path"], "imgs/a.jpg");

    let r = c
        .put(format!("{url}/v1/containers/nope/blobs/a.jpg"))
        .body("x")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    assert_eq!(json(&r.bytes().await.unwrap())["error"], "UnknownContainer");
    // an encoded slash keeps `..` inside one URL segment until the server decodes it
    let r = c
        .put(format!("{url}/v1/containers/stream/blobs/a%2F..%2Fb"))
        .body("x")
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let r = c
        .put(format!("{url}/v1/containers/stream/blobs/big"))
        .body(vec![0u8; 1024 * 1024 + 1])
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::PAYLOAD_TOO_LARGE);

    let r = c
        .delete(format!("{url}/v1/containers/stream/blobs/imgs/a.jpg"))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::NO_CONTENT);
    let r = c
        .delete(format!("{url}/v1/containers/stream/blobs/imgs/a.jpg"))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
    let r = c
        .get(format!("{url}/v1/containers/stream/blobs/imgs/a.jpg"))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn latency_injection_and_concurrency_probe() {
    let cfg = StoreHttpConfig {
        test_mode: true,
        latency: Duration::from_millis(0),
    };
    let (_dir, url, store) = serve(cfg).await;
    store.create_container("bench").unwrap();
    let c = reqwest::Client::new();
    let t0 = Instant::now();
    let futs: Vec<_> = (0..10)
        .map(|i| {
            c.put(format!("{url}/v1/containers/bench/blobs/{i}.bin"))
                .header(LATENCY_HEADER, "100")
                .body(vec![i as u8; 10])
                .send()
        })
        .collect();
    for r in futures_join(futs).await {
        assert_eq!(r.unwrap().status(), StatusCode::CREATED);
    }
    let elapsed = t0.elapsed();
    assert!(elapsed >= Duration::from_millis(100));
    assert!(elapsed < Duration::from_millis(900), "{elapsed:?}");
    let stats: StatsSnapshot = serde_json::from_slice(
        &c.get(format!("{url}/v1/stats"))
            .send()
            .await
            .unwrap()
            .bytes()
            .await
            .unwrap(),
    )
    .unwrap();
    assert!(stats.max_in_flight >= 2 && stats.max_in_flight <= 10, "{stats:?}");
    assert_eq!(stats.requests, 10);
}

async fn futures_join<F: std::future::Future + Send + 'static>(futs: Vec<F>) -> Vec<F::Output>
where
    F::Output: Send + 'static,
{
    let handles: Vec<_> = futs.into_iter().map(tokio::spawn).collect();
    let mut out = Vec::new();
    for h in handles {
        out.push(h.await.unwrap());
    }
    out
}
