use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use bloompipe_orchestrator::{ComputePool, Phase, PoolConfig, PoolError, SystemClock};
use proptest::prelude::*;

fn config(cold_start_ms: u64) -> PoolConfig {
    PoolConfig {
        cold_start_ms,
        ..PoolConfig::default()
    }
}

#[test]
fn cold_then_warm() {
    let pool = ComputePool::new(config(300), Arc::new(SystemClock)).unwrap();
    assert_eq!(pool.state().phase, Phase::Terminated);

    let t0 = Instant::now();
    let first = pool
        .submit(|| std::thread::sleep(Duration::from_millis(20)))
        .join_blocking()
        .unwrap();
    assert!(
        t0.elapsed() >= Duration::from_millis(300),
        "cold start skipped: {:?}",
        t0.elapsed()
    );
    assert!(first.dispatch_latency >= Duration::from_millis(300));
    assert_eq!(pool.state().phase, Phase::Ready);

    let t1 = Instant::now();
    let second = pool
        .submit(|| std::thread::sleep(Duration::from_millis(20)))
        .join_blocking()
        .unwrap();
    let elapsed = t1.elapsed();
    assert!(
        second.dispatch_latency < Duration::from_millis(100),
        "{:?}",
        second.dispatch_latency
    );
    assert!(elapsed < second.run_time + Duration::from_millis(100), "{elapsed:?}");
    assert_eq!(pool.state().cold_starts, 1);
}

#[test]
fn autoscale_follows_load_and_scales_down_when_drained() {
    let pool = ComputePool::new(config(0), Arc::new(SystemClock)).unwrap();
    let gate = Arc::new(Barrier::new(33));
    let handles: Vec<_> = (0..64)
        .map(|i| {
            let gate = gate.clone();
            // the first 32 tasks occupy all 8 x 4 slots until released
            pool.submit(move || {
                if i < 32 {
                    gate.wait();
                }
                i
            })
        })
        .collect();
    let deadline = Instant::now() + Duration::from_secs(5);
    while pool.state().running_tasks < 32 && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(5));
    }
    let busy = pool.state();
    assert_eq!(busy.active_workers, 8);
    assert_eq!(busy.running_tasks, 32);
    assert_eq!(busy.queued_tasks, 32);

    gate.wait();
    let values: Vec<i32> = handles.into_iter().map(|h| h.join_blocking().unwrap().value).collect();
    assert_eq!(values, (0..64).collect::<Vec<_>>());
    assert!(pool.wait_drained(Duration::from_secs(5)));
    let idle = pool.state();
    assert_eq!(idle.active_workers, 2);
    assert_eq!(idle.peak_workers, 8);
}

#[test]
fn moderate_load_uses_proportional_workers() {
    let pool = ComputePool::new(config(0), Arc::new(SystemClock)).unwrap();
    let gate = Arc::new(Barrier::new(11));
    let handles: Vec<_> = (0..10)
        .map(|_| {
            let gate = gate.clone();
            pool.submit(move || {
                gate.wait();
            })
        })
        .collect();
    let deadline = Instant::now() + Duration::from_secs(5);
    while pool.state().running_tasks < 10 && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(5));
    }
    // ceil(10 / 4) = 3
    assert_eq!(pool.state().active_workers, 3);
    gate.wait();
    for h in handles {
        h.join_blocking().unwrap();
    }
}

fn quiet_planned_panics() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        let default = std::panic::take_hook();
        std::panic::set_hook(Box::new(move |info| {
            if info.payload().downcast_ref::<&str>() != Some(&"planned") {
                default(info);
            }
        }));
    });
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_task_resolves_exactly_once(
        panics in prop::collection::vec(any::<bool>(), 1..80),
        min in 1usize..4,
        extra in 0usize..5,
        per in 1usize..5,
    ) {
        let cfg = PoolConfig {
            min_workers: min,
            max_workers: min + extra,
            cold_start_ms: 0,
            tasks_per_worker: per,
            ..PoolConfig::default()
        };
        quiet_planned_panics();
        let pool = ComputePool::new(cfg.clone(), Arc::new(SystemClock)).unwrap();
        let ran = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = panics
            .iter()
            .map(|&p| {
                let ran = ran.clone();
                pool.submit(move || {
                    ran.fetch_add(1, Ordering::SeqCst);
                    if p {
                        panic!("planned");
                    }
                })
            })
            .collect();
        let mut seen = Vec::new();
        for h in handles {
            seen.push(pool.state());
            seen.push(pool.state());
            match h.join_blocking() {
                Ok(_) => {}
                Err(PoolError::TaskPanicked(m)) => prop_assert_eq!(m, "planned"),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
        prop_assert_eq!(ran.load(Ordering::SeqCst), panics.len());
        for s in seen {
            if s.phase == Phase::Ready {
                prop_assert!((cfg.min_workers..=cfg.max_workers).contains(&s.active_workers), "{s:?}");
                prop_assert!(s.running_tasks <= s.active_workers * cfg.tasks_per_worker);
            }
        }
    }
}
