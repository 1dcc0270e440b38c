//! Shared pool for data-parallel rollouts and batch scoring, sized by
//! `ILFLOW_NUM_THREADS` (all cores when unset, zero or unparsable).

use std::sync::OnceLock;

pub const THREADS_VAR: &str = "ILFLOW_NUM_THREADS";

pub fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var(THREADS_VAR)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .thread_name(|i| format!("ilflow-{i}"))
            .build()
            .expect("thread pool")
    })
}

/// Runs `f` inside the shared pool.
pub fn install<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    pool().install(f)
}
