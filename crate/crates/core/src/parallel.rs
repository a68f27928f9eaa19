//! Worker-thread control. Every parallel kernel reduces in a fixed order, so
//! the thread count changes speed only, never results.

use rayon::{ThreadPool, ThreadPoolBuilder};

pub const THREADS_ENV: &str = "METROKIT_THREADS";

/// Thread cap from `METROKIT_THREADS`, if set to a positive integer.
pub fn env_threads() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

pub fn pool(threads: usize) -> ThreadPool {
    ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("failed to build worker pool")
}

/// Runs `f` on a pool of exactly `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    pool(threads).install(f)
}

/// Configures the global pool from the environment; a no-op if it is already built.
pub fn init_from_env() {
    if let Some(n) = env_threads() {
        let _ = ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
