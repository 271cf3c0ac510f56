//! In-process event routing from the blob store to trigger targets.
//!
//! Each subscription owns a bounded FIFO queue drained by one delivery thread,
//! so events for a subscription arrive in publish order while different
//! subscriptions deliver in parallel. A full queue blocks the publisher.
//! Failed deliveries are retried after a fixed backoff and dead-lettered once
//! `max_delivery_attempts` is exhausted.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use crossbeam_channel::{bounded, Sender};
use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::blob::{BlobEvent, EventKind};
use crate::store::EventSink;

pub const DEFAULT_QUEUE_DEPTH: usize = 10_000;
pub const DEFAULT_RETRY_BACKOFF: Duration = Duration::from_millis(100);
pub const DEFAULT_MAX_DELIVERY_ATTEMPTS: u32 = 3;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum BusError {
    #[error("unknown target {0}")]
    UnknownTarget(String),
    #[error("invalid subscription: {0}")]
    InvalidSubscription(String),
    #[error("unknown subscription {0}")]
    UnknownSubscription(String),
}

/// Something events can be delivered to, e.g. an event trigger.
pub trait EventTarget: Send + Sync {
    fn deliver(&self, event: &BlobEvent) -> Result<(), String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFilter {
    pub container: String,
    #[serde(default)]
    pub path_prefix: String,
    #[serde(default)]
    pub path_suffix: String,
    #[serde(default = "all_kinds")]
    pub kinds: BTreeSet<EventKind>,
}

fn all_kinds() -> BTreeSet<EventKind> {
    [EventKind::BlobCreated, EventKind::BlobDeleted].into()
}

impl EventFilter {
    /// Filter on BlobCreated events in `container`.
    pub fn created_in(container: impl Into<String>) -> Self {
        Self {
            container: container.into(),
            path_prefix: String::new(),
            path_suffix: String::new(),
            kinds: [EventKind::BlobCreated].into(),
        }
    }

    pub fn with_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.path_prefix = prefix.into();
        self
    }

    pub fn with_suffix(mut self, suffix: impl Into<String>) -> Self {
        self.path_suffix = suffix.into();
        self
    }

    pub fn matches(&self, event: &BlobEvent) -> bool {
        event.container == self.container
            && event.path.starts_with(&self.path_prefix)
            && event.path.ends_with(&self.path_suffix)
            && self.kinds.contains(&event.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    pub subscription_id: String,
    pub filter: EventFilter,
    pub target: String,
    pub max_delivery_attempts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeliveryStatus {
    Delivered,
    DeadLettered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub event_id: String,
    pub subscription_id: String,
    pub attempts: u32,
    pub status: DeliveryStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
    pub recorded_at: DateTime<Utc>,
    pub event: BlobEvent,
}

#[derive(Debug, Clone)]
pub struct BusConfig {
    pub queue_depth: usize,
    pub retry_backoff: Duration,
}

impl Default for BusConfig {
    fn default() -> Self {
        Self {
            queue_depth: DEFAULT_QUEUE_DEPTH,
            retry_backoff: DEFAULT_RETRY_BACKOFF,
        }
    }
}

#[derive(Default)]
struct Shared {
    records: Mutex<Vec<DeliveryRecord>>,
    pending: Mutex<usize>,
    idle: Condvar,
}

impl Shared {
    fn finish(&self, record: DeliveryRecord) {
        self.records.lock().push(record);
        let mut pending = self.pending.lock();
        *pending -= 1;
        if *pending == 0 {
            self.idle.notify_all();
        }
    }
}

struct SubscriptionHandle {
    sub: Subscription,
    queue: Sender<BlobEvent>,
    worker: Option<JoinHandle<()>>,
}

pub struct EventBus {
    cfg: BusConfig,
    targets: RwLock<HashMap<String, Arc<dyn EventTarget>>>,
    subs: RwLock<Vec<SubscriptionHandle>>,
    shared: Arc<Shared>,
}

impl Default for EventBus {
    fn default() -> Self {
        Self::new(BusConfig::default())
    }
}

impl EventBus {
    pub fn new(cfg: BusConfig) -> Self {
        Self {
            cfg,
            targets: RwLock::new(HashMap::new()),
            subs: RwLock::new(Vec::new()),
            shared: Arc::default(),
        }
    }

    pub fn register_target(&self, id: impl Into<String>, target: Arc<dyn EventTarget>) {
        self.targets.write().insert(id.into(), target);
    }

    pub fn subscribe(
        &self,
        filter: EventFilter,
        target: &str,
        max_delivery_attempts: u32,
    ) -> Result<Subscription, BusError> {
        if filter.container.is_empty() {
            return Err(BusError::InvalidSubscription("filter container is empty".into()));
        }
        if max_delivery_attempts == 0 {
            return Err(BusError::InvalidSubscription(
                "max_delivery_attempts must be at least 1".into(),
            ));
        }
        let handler = self
            .targets
            .read()
            .get(target)
            .cloned()
            .ok_or_else(|| BusError::UnknownTarget(target.to_string()))?;
        let sub = Subscription {
            subscription_id: uuid::Uuid::new_v4().to_string(),
            filter,
            target: target.to_string(),
            max_delivery_attempts,
        };
        let (tx, rx) = bounded::<BlobEvent>(self.cfg.queue_depth);
        let shared = self.shared.clone();
        let backoff = self.cfg.retry_backoff;
        let sub_id = sub.subscription_id.clone();
        let worker = std::thread::Builder::new()
            .name(format!("deliver-{target}"))
            .spawn(move || {
                for event in rx {
                    let mut attempts = 0;
                    let (status, last_error) = loop {
                        attempts += 1;
                        match handler.deliver(&event) {
                            Ok(()) => break (DeliveryStatus::Delivered, None),
                            Err(e) if attempts >= max_delivery_attempts => break (DeliveryStatus::DeadLettered, Some(e)),
                            Err(e) => {
                                tracing::debug!(event = %event.event_id, attempts, error = %e, "delivery failed, retrying");
                                std::thread::sleep(backoff);
                            }
                        }
                    };
                    shared.finish(DeliveryRecord {
                        event_id: event.event_id.clone(),
                        subscription_id: sub_id.clone(),
                        attempts,
                        status,
                        last_error,
                        recorded_at: Utc::now(),
                        event,
                    });
                }
            })
            .expect("spawn delivery thread");
        self.subs.write().push(SubscriptionHandle {
            sub: sub.clone(),
            queue: tx,
            worker: Some(worker),
        });
        Ok(sub)
    }

    /// Removes a subscription; events already queued are still delivered.
    pub fn unsubscribe(&self, subscription_id: &str) -> Result<(), BusError> {
        let mut subs = self.subs.write();
        let pos = subs
            .iter()
            .position(|s| s.sub.subscription_id == subscription_id)
            .ok_or_else(|| BusError::UnknownSubscription(subscription_id.to_string()))?;
        subs.remove(pos);
        Ok(())
    }

    pub fn subscriptions(&self) -> Vec<Subscription> {
        self.subs.read().iter().map(|s| s.sub.clone()).collect()
    }

    /// Routes `event` to every matching subscription, blocking while any
    /// target queue is full. Returns the number of matches.
    pub fn publish(&self, event: BlobEvent) -> usize {
        let queues: Vec<Sender<BlobEvent>> = self
            .subs
            .read()
            .iter()
            .filter(|s| s.sub.filter.matches(&event))
            .map(|s| s.queue.clone())
            .collect();
        *self.shared.pending.lock() += queues.len();
        for q in &queues {
            if q.send(event.clone()).is_err() {
                // worker gone (unsubscribed concurrently): account for it
                let mut pending = self.shared.pending.lock();
                *pending -= 1;
                if *pending == 0 {
                    self.shared.idle.notify_all();
                }
            }
        }
        queues.len()
    }

    /// Every finished delivery, in completion order.
    pub fn deliveries(&self) -> Vec<DeliveryRecord> {
        self.shared.records.lock().clone()
    }

    /// Dead-lettered deliveries, oldest first.
    pub fn dead_letters(&self) -> Vec<DeliveryRecord> {
        self.shared
            .records
            .lock()
            .iter()
            .filter(|r| r.status == DeliveryStatus::DeadLettered)
            .cloned()
            .collect()
    }

    pub fn pending(&self) -> usize {
        *self.shared.pending.lock()
    }

    /// Blocks until no deliveries are queued or in progress. Returns false on timeout.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut pending = self.shared.pending.lock();
        while *pending > 0 {
            if self.shared.idle.wait_until(&mut pending, deadline).timed_out() {
                return *pending == 0;
            }
        }
        true
    }
}

impl EventSink for EventBus {
    fn publish(&self, event: BlobEvent) -> usize {
        EventBus::publish(self, event)
    }
}

impl Drop for EventBus {
    fn drop(&mut self) {
        let handles: Vec<SubscriptionHandle> = self.subs.write().drain(..).collect();
        for mut h in handles {
            let worker = h.worker.take();
            drop(h);
            if let Some(w) = worker {
                let _ = w.join();
            }
        }
    }
}
