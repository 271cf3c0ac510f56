//! `bloompipe-pipeline [CONFIG.toml]`
//!
//! Runs the blob store API and the orchestrator API. Without a config file
//! the defaults apply: data under `./bloompipe-data`, store on
//! 127.0.0.1:7070, orchestrator on 127.0.0.1:7071. `PIPE_FAKE_CLOCK=1`
//! switches to simulated time driven by `POST /v1/_clock/advance`.

use std::path::PathBuf;
use std::process::ExitCode;

use bloompipe_orchestrator::service::{Service, ServiceConfig};

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();

    let mut args = std::env::args().skip(1);
    let cfg = match args.next() {
        Some(flag) if flag == "-h" || flag == "--help" => {
            println!("usage: bloompipe-pipeline [CONFIG.toml]");
            return ExitCode::SUCCESS;
        }
        Some(path) => ServiceConfig::load(&PathBuf::from(path)),
        None => Ok(ServiceConfig::default()),
    };
    let cfg = match cfg {
        Ok(c) => c.with_env(),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let service = match Service::start(cfg).await {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    tracing::info!(store = %service.store_url, orchestrator = %service.orch_url, "pipeline service listening");
    println!("store {}", service.store_url);
    println!("orchestrator {}", service.orch_url);
    let _ = tokio::signal::ctrl_c().await;
    service.shutdown().await;
    ExitCode::SUCCESS
}
