//! Local object storage for the pipeline.
//!
//! [`BlobStore`] keeps blobs under `root/{container}/{path}` with a JSON-lines
//! metadata log per container, and reports every successful write or delete
//! to an [`EventSink`]. [`EventBus`] is the in-process sink that fans events
//! out to filtered subscriptions with retry and dead-lettering. [`http`]
//! exposes the store over REST.

pub mod blob;
pub mod bus;
pub mod http;
mod store;

pub use blob::{validate_container_name, validate_path, Blob, BlobEvent, BlobMeta, EventKind};
pub use bus::{BusConfig, BusError, DeliveryRecord, DeliveryStatus, EventBus, EventFilter, EventTarget, Subscription};
pub use store::{BlobStore, EventSink, StoreConfig, StoreError};
