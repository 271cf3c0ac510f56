//! Client side of the bloom detection pipeline: HTTP clients for the store
//! and orchestrator, directory ingestion in sync or bounded-concurrency
//! async mode, the ingestion benchmark, and the `bloompipe` command line.

pub mod bench;
pub mod cli;
pub mod client;
pub mod ingest;

pub use bench::{bench_ingest, BenchPlan, BenchReport};
pub use cli::{run, Cli, CliError};
pub use client::{ClientError, OrchClient, StoreClient};
pub use ingest::{ingest, IngestError, IngestPlan, IngestSummary, Mode};
