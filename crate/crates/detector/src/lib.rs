//! Bloom detection behind an authenticated HTTP scoring endpoint.

pub mod backend;
pub mod service;

pub use backend::{Connectivity, DetectorBackend, FixtureError, MockBackend, ThresholdBackend, ThresholdParams};
pub use service::{router, ConfigError, ServiceConfig, DEFAULT_BODY_LIMIT};
