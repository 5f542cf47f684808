//! Thread-pool executor for client training.

use fedaudio_core::fl::Executor;
use rayon::prelude::*;

pub const WORKERS_ENV: &str = "FEDAUDIO_SIM_WORKERS";

/// Worker count from `FEDAUDIO_SIM_WORKERS`, falling back to the CPU count.
pub fn workers_from_env() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub struct PoolExecutor {
    pool: rayon::ThreadPool,
}

impl PoolExecutor {
    pub fn new(workers: usize) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .expect("failed to start worker threads");
        Self { pool }
    }

    pub fn from_env() -> Self {
        Self::new(workers_from_env())
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Executor for PoolExecutor {
    fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        // Indexed parallel collect keeps input order.
        self.pool.install(|| items.into_par_iter().map(f).collect())
    }
}
