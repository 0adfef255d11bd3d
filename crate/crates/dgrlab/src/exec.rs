//! Thread-pool executor for evaluation jobs.

use anyhow::Context;
use dgrlab_core::eval::Executor;
use rayon::prelude::*;

pub const THREADS_VAR: &str = "DGRLAB_THREADS";

/// Runs evaluation jobs on a rayon pool. Results come back in index order,
/// so reports do not depend on the thread count.
pub struct Pool {
    pool: rayon::ThreadPool,
}

impl Pool {
    /// `threads = None` lets rayon pick one thread per core.
    pub fn new(threads: Option<usize>) -> anyhow::Result<Self> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            anyhow::ensure!(n > 0, "{THREADS_VAR} must be positive");
            b = b.num_threads(n);
        }
        Ok(Self {
            pool: b.build().context("starting the thread pool")?,
        })
    }

    /// Reads the thread bound from `DGRLAB_THREADS`.
    pub fn from_env() -> anyhow::Result<Self> {
        let threads = match std::env::var(THREADS_VAR) {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .with_context(|| format!("{THREADS_VAR}={v:?} is not a thread count"))?,
            ),
            Err(_) => None,
        };
        Self::new(threads)
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Executor for Pool {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }
}
