//! Simulated processing cluster for Process and Render work.
//!
//! A terminated pool cold-starts on first submit, then runs tasks on
//! `active_workers * tasks_per_worker` slots. The worker count follows the
//! load, `clamp(ceil((queued + running) / tasks_per_worker), min, max)`,
//! shrinking only once the queue is empty. An idle pool terminates after
//! `idle_timeout_ms` without activity, checked by [`ComputePool::tick_idle`].

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use crate::clock::Clock;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub min_workers: usize,
    pub max_workers: usize,
    pub cold_start_ms: u64,
    pub idle_timeout_ms: u64,
    pub tasks_per_worker: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            min_workers: 2,
            max_workers: 8,
            cold_start_ms: 3_000,
            idle_timeout_ms: 60_000,
            tasks_per_worker: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid pool config: {0}")]
pub struct PoolConfigError(pub String);

impl PoolConfig {
    pub fn validate(&self) -> Result<(), PoolConfigError> {
        if self.min_workers < 1 || self.min_workers > self.max_workers {
            return Err(PoolConfigError(format!(
                "need 1 <= min_workers ({}) <= max_workers ({})",
                self.min_workers, self.max_workers
            )));
        }
        if self.idle_timeout_ms == 0 {
            return Err(PoolConfigError("idle_timeout_ms must be positive".into()));
        }
        if self.tasks_per_worker == 0 {
            return Err(PoolConfigError("tasks_per_worker must be positive".into()));
        }
        Ok(())
    }

    /// Worker count the autoscaler aims for with `load` queued plus running tasks.
    pub fn target_workers(&self, load: usize) -> usize {
        load.div_ceil(self.tasks_per_worker)
            .clamp(self.min_workers, self.max_workers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Terminated,
    Starting,
    Ready,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolState {
    pub phase: Phase,
    pub active_workers: usize,
    pub queued_tasks: usize,
    pub running_tasks: usize,
    pub last_activity_at: DateTime<Utc>,
    /// Highest worker count since the last cold start.
    pub peak_workers: usize,
    pub cold_starts: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PoolError {
    #[error("PoolStartTimeout: pool not ready after {waited_ms} ms")]
    StartTimeout { waited_ms: u64 },
    #[error("TaskPanicked: {0}")]
    TaskPanicked(String),
    #[error("pool shut down")]
    ShutDown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskOutput<T> {
    pub value: T,
    /// Time from submit until a worker picked the task up.
    pub dispatch_latency: Duration,
    pub run_time: Duration,
}

type JobFn = Box<dyn FnOnce(Result<Duration, PoolError>) + Send>;

struct Job {
    run: JobFn,
    enqueued: Instant,
}

struct State {
    phase: Phase,
    active: usize,
    queue: VecDeque<Job>,
    running: usize,
    last_activity: DateTime<Utc>,
    peak: usize,
    cold_starts: u64,
    generation: u64,
    shutdown: bool,
}

/// Blocks until provisioning of a cold pool completes.
pub type Provisioner = Arc<dyn Fn(Duration) + Send + Sync>;

struct Inner {
    cfg: PoolConfig,
    state: Mutex<State>,
    changed: Condvar,
    clock: Arc<dyn Clock>,
    provisioner: Provisioner,
}

pub struct ComputePool {
    inner: Arc<Inner>,
    workers: Vec<JoinHandle<()>>,
}

pub struct TaskHandle<T> {
    rx: oneshot::Receiver<Result<TaskOutput<T>, PoolError>>,
}

impl<T> TaskHandle<T> {
    pub async fn join(self) -> Result<TaskOutput<T>, PoolError> {
        self.rx.await.unwrap_or(Err(PoolError::ShutDown))
    }

    /// Waits on the calling thread; must not be used inside an async runtime.
    pub fn join_blocking(self) -> Result<TaskOutput<T>, PoolError> {
        self.rx.blocking_recv().unwrap_or(Err(PoolError::ShutDown))
    }
}

impl ComputePool {
    pub fn new(cfg: PoolConfig, clock: Arc<dyn Clock>) -> Result<Self, PoolConfigError> {
        Self::with_provisioner(cfg, clock, Arc::new(std::thread::sleep))
    }

    pub fn with_provisioner(
        cfg: PoolConfig,
        clock: Arc<dyn Clock>,
        provisioner: Provisioner,
    ) -> Result<Self, PoolConfigError> {
        cfg.validate()?;
        let slots = cfg.max_workers * cfg.tasks_per_worker;
        let inner = Arc::new(Inner {
            state: Mutex::new(State {
                phase: Phase::Terminated,
                active: 0,
                queue: VecDeque::new(),
                running: 0,
                last_activity: clock.now(),
                peak: 0,
                cold_starts: 0,
                generation: 0,
                shutdown: false,
            }),
            cfg,
            changed: Condvar::new(),
            clock,
            provisioner,
        });
        let workers = (0..slots)
            .map(|i| {
                let inner = inner.clone();
                std::thread::Builder::new()
                    .name(format!("pool-{i}"))
                    .spawn(move || worker(inner))
                    .expect("spawn pool worker")
            })
            .collect();
        Ok(Self { inner, workers })
    }

    pub fn config(&self) -> &PoolConfig {
        &self.inner.cfg
    }

    pub fn submit<T, F>(&self, f: F) -> TaskHandle<T>
    where
        T: Send + 'static,
        F: FnOnce() -> T + Send + 'static,
    {
        let (tx, rx) = oneshot::channel();
        let run: JobFn = Box::new(move |ready| {
            let out = ready.and_then(|dispatch_latency| {
                let t0 = Instant::now();
                catch_unwind(AssertUnwindSafe(f))
                    .map(|value| TaskOutput {
                        value,
                        dispatch_latency,
                        run_time: t0.elapsed(),
                    })
                    .map_err(|p| PoolError::TaskPanicked(panic_message(&*p)))
            });
            let _ = tx.send(out);
        });
        let mut st = self.inner.state.lock();
        if st.shutdown {
            drop(st);
            run(Err(PoolError::ShutDown));
            return TaskHandle { rx };
        }
        st.queue.push_back(Job {
            run,
            enqueued: Instant::now(),
        });
        st.last_activity = self.inner.clock.now();
        match st.phase {
            Phase::Terminated => begin_start(&self.inner, &mut st),
            Phase::Starting => {}
            Phase::Ready => rescale(&self.inner.cfg, &mut st),
        }
        self.inner.changed.notify_all();
        TaskHandle { rx }
    }

    /// Starts a terminated pool without submitting work.
    pub fn start(&self) {
        let mut st = self.inner.state.lock();
        if st.phase == Phase::Terminated && !st.shutdown {
            st.last_activity = self.inner.clock.now();
            begin_start(&self.inner, &mut st);
            self.inner.changed.notify_all();
        }
    }

    /// Blocks until the pool is Ready. Returns false on timeout.
    pub fn wait_ready(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.inner.state.lock();
        while st.phase != Phase::Ready {
            if self.inner.changed.wait_until(&mut st, deadline).timed_out() {
                return st.phase == Phase::Ready;
            }
        }
        true
    }

    /// Blocks until nothing is queued or running. Returns false on timeout.
    pub fn wait_drained(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.inner.state.lock();
        while st.running > 0 || !st.queue.is_empty() {
            if self.inner.changed.wait_until(&mut st, deadline).timed_out() {
                return st.running == 0 && st.queue.is_empty();
            }
        }
        true
    }

    pub fn state(&self) -> PoolState {
        let st = self.inner.state.lock();
        PoolState {
            phase: st.phase,
            active_workers: st.active,
            queued_tasks: st.queue.len(),
            running_tasks: st.running,
            last_activity_at: st.last_activity,
            peak_workers: st.peak,
            cold_starts: st.cold_starts,
        }
    }

    /// Terminates a Ready pool that has had no work for the idle timeout.
    pub fn tick_idle(&self, now: DateTime<Utc>) -> Phase {
        let mut st = self.inner.state.lock();
        let idle_for = now.signed_duration_since(st.last_activity);
        if st.phase == Phase::Ready
            && st.running == 0
            && st.queue.is_empty()
            && idle_for >= chrono::Duration::milliseconds(self.inner.cfg.idle_timeout_ms as i64)
        {
            st.phase = Phase::Terminated;
            st.active = 0;
            tracing::info!("compute pool terminated after idle timeout");
        }
        st.phase
    }
}

impl Drop for ComputePool {
    fn drop(&mut self) {
        let leftovers: Vec<Job> = {
            let mut st = self.inner.state.lock();
            st.shutdown = true;
            self.inner.changed.notify_all();
            st.queue.drain(..).collect()
        };
        for job in leftovers {
            (job.run)(Err(PoolError::ShutDown));
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "task panicked".into())
}

fn rescale(cfg: &PoolConfig, st: &mut State) {
    if st.phase != Phase::Ready {
        return;
    }
    let target = cfg.target_workers(st.queue.len() + st.running);
    if target > st.active || st.queue.is_empty() {
        st.active = target;
    }
    st.peak = st.peak.max(st.active);
}

fn become_ready(inner: &Inner, st: &mut State) {
    st.phase = Phase::Ready;
    st.active = inner.cfg.min_workers;
    st.peak = st.active;
    st.last_activity = inner.clock.now();
    rescale(&inner.cfg, st);
}

fn begin_start(inner: &Arc<Inner>, st: &mut State) {
    st.generation += 1;
    st.cold_starts += 1;
    let cold = Duration::from_millis(inner.cfg.cold_start_ms);
    if cold.is_zero() {
        become_ready(inner, st);
        return;
    }
    st.phase = Phase::Starting;
    let generation = st.generation;
    let inner = inner.clone();
    std::thread::spawn(move || {
        let (tx, rx) = std::sync::mpsc::channel();
        let provision = inner.provisioner.clone();
        std::thread::spawn(move || {
            provision(cold);
            let _ = tx.send(());
        });
        let limit = cold * 10;
        let ok = rx.recv_timeout(limit).is_ok();
        let mut st = inner.state.lock();
        if st.generation != generation || st.phase != Phase::Starting {
            return;
        }
        if ok {
            become_ready(&inner, &mut st);
            inner.changed.notify_all();
        } else {
            st.phase = Phase::Terminated;
            st.active = 0;
            let failed: Vec<Job> = st.queue.drain(..).collect();
            inner.changed.notify_all();
            drop(st);
            tracing::warn!(jobs = failed.len(), "compute pool failed to start");
            for job in failed {
                (job.run)(Err(PoolError::StartTimeout {
                    waited_ms: limit.as_millis() as u64,
                }));
            }
        }
    });
}

fn worker(inner: Arc<Inner>) {
    let cfg = &inner.cfg;
    loop {
        let job = {
            let mut st = inner.state.lock();
            loop {
                if st.shutdown {
                    return;
                }
                if st.phase == Phase::Ready && !st.queue.is_empty() && st.running < st.active * cfg.tasks_per_worker {
                    break;
                }
                inner.changed.wait(&mut st);
            }
            let job = st.queue.pop_front().expect("queue checked non-empty");
            st.running += 1;
            st.last_activity = inner.clock.now();
            rescale(cfg, &mut st);
            job
        };
        (job.run)(Ok(job.enqueued.elapsed()));
        let mut st = inner.state.lock();
        st.running -= 1;
        st.last_activity = inner.clock.now();
        rescale(cfg, &mut st);
        inner.changed.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{FakeClock, SystemClock};

    fn cfg(cold: u64) -> PoolConfig {
        PoolConfig {
            cold_start_ms: cold,
            ..PoolConfig::default()
        }
    }

    #[test]
    fn autoscale_formula() {
        let c = PoolConfig::default();
        assert_eq!(c.target_workers(0), 2);
        assert_eq!(c.target_workers(6), 2);
        assert_eq!(c.target_workers(9), 3);
        assert_eq!(c.target_workers(100), 8);
    }

    #[test]
    fn config_validation() {
        assert!(PoolConfig {
            min_workers: 0,
            ..cfg(0)
        }
        .validate()
        .is_err());
        assert!(PoolConfig {
            min_workers: 9,
            ..cfg(0)
        }
        .validate()
        .is_err());
        assert!(PoolConfig {
            idle_timeout_ms: 0,
            ..cfg(0)
        }
        .validate()
        .is_err());
        assert!(PoolConfig {
            tasks_per_worker: 0,
            ..cfg(0)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn panics_are_reported_and_pool_survives() {
        let pool = ComputePool::new(cfg(0), Arc::new(SystemClock)).unwrap();
        let bad = pool.submit(|| -> u32 { panic!("boom") });
        assert_eq!(bad.join_blocking(), Err(PoolError::TaskPanicked("boom".into())));
        assert_eq!(pool.submit(|| 7).join_blocking().unwrap().value, 7);
        assert!(pool.wait_drained(Duration::from_secs(5)));
        assert_eq!(pool.state().running_tasks, 0);
    }

    #[test]
    fn hung_provisioning_times_out() {
        let clock = Arc::new(SystemClock);
        let hang: Provisioner = Arc::new(|_| std::thread::sleep(Duration::from_millis(500)));
        let pool = ComputePool::with_provisioner(cfg(20), clock, hang).unwrap();
        let h = pool.submit(|| 1);
        assert_eq!(h.join_blocking(), Err(PoolError::StartTimeout { waited_ms: 200 }));
        assert_eq!(pool.state().phase, Phase::Terminated);
    }

    #[test]
    fn idle_termination_on_first_tick_at_timeout() {
        let t0 = Utc::now();
        let clock = Arc::new(FakeClock::new(t0));
        let pool = ComputePool::new(cfg(0), clock.clone()).unwrap();
        pool.submit(|| ()).join_blocking().unwrap();
        assert!(pool.wait_drained(Duration::from_secs(5)));
        let last = pool.state().last_activity_at;
        assert_eq!(
            pool.tick_idle(last + chrono::Duration::milliseconds(59_999)),
            Phase::Ready
        );
        assert_eq!(
            pool.tick_idle(last + chrono::Duration::milliseconds(60_000)),
            Phase::Terminated
        );
        assert_eq!(pool.state().active_workers, 0);
        assert_eq!(pool.tick_idle(last + chrono::Duration::hours(1)), Phase::Terminated);
    }
}
