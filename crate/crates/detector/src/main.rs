//! Detector service.
//!
//! Environment:
//! - `DETECTOR_KEYS`: comma-separated API keys (required)
//! - `DETECTOR_BACKEND`: `threshold` (default) or `mock`
//! - `DETECTOR_FIXTURES`: fixture table for the mock backend
//! - `DETECTOR_ADDR`: listen address, default `127.0.0.1:7080`

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use bloompipe_detector::{router, DetectorBackend, MockBackend, ServiceConfig, ThresholdBackend};

fn backend_from_env() -> Result<Arc<dyn DetectorBackend>, String> {
    match std::env::var("DETECTOR_BACKEND").as_deref().unwrap_or("threshold") {
        "threshold" => Ok(Arc::new(ThresholdBackend::default())),
        "mock" => {
            let path =
                std::env::var("DETECTOR_FIXTURES").map_err(|_| "DETECTOR_FIXTURES is required for the mock backend")?;
            let mock = MockBackend::load(&PathBuf::from(path)).map_err(|e| e.to_string())?;
            tracing::info!(entries = mock.len(), "loaded mock fixtures");
            Ok(Arc::new(mock))
        }
        other => Err(format!(
            "unknown DETECTOR_BACKEND {other:?}; expected mock or threshold"
        )),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let cfg = backend_from_env().and_then(|backend| {
        let keys = std::env::var("DETECTOR_KEYS").unwrap_or_default();
        ServiceConfig::with_key_list(backend, &keys).map_err(|e| format!("DETECTOR_KEYS: {e}"))
    });
    let cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("bloompipe-detector: {e}");
            return ExitCode::from(2);
        }
    };
    let addr = std::env::var("DETECTOR_ADDR").unwrap_or_else(|_| "127.0.0.1:7080".into());
    let listener = match tokio::net::TcpListener::bind(&addr).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("bloompipe-detector: cannot listen on {addr}: {e}");
            return ExitCode::FAILURE;
        }
    };
    tracing::info!(%addr, backend = cfg.backend.name(), "detector listening");
    let served = axum::serve(listener, router(cfg))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await;
    match served {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bloompipe-detector: {e}");
            ExitCode::FAILURE
        }
    }
}
