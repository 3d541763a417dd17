//! Shared worker pool for batch scans. `NEST_THREADS` caps the pool size;
//! the default is one worker per available core.

use once_cell::sync::Lazy;
use rayon::{ThreadPool, ThreadPoolBuilder};

static POOL: Lazy<ThreadPool> = Lazy::new(|| {
    let threads = std::env::var("NEST_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0); // 0 lets rayon pick the core count
    ThreadPoolBuilder::new()
        .num_threads(threads)
        .thread_name(|i| format!("nest-worker-{i}"))
        .build()
        .expect("failed to build worker pool")
});

pub fn pool() -> &'static ThreadPool {
    &POOL
}
