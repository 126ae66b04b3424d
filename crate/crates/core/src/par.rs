//! Execution strategy for the embarrassingly parallel loops (benchmark
//! repeats, sweep cells, Monte-Carlo rounds, oracle sweeps).
//!
//! Results are always returned in index order, so the strategy never changes
//! the output. Without the `parallel` feature every strategy runs sequentially.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Evaluates `f(0..n)` and collects the results in index order.
    pub fn map_indexed<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Execution::Sequential => (0..n).map(f).collect(),
            Execution::Parallel => parallel_map(n, f),
        }
    }

    /// True when this build can actually run work on more than one thread.
    pub fn is_parallel_capable() -> bool {
        cfg!(feature = "parallel")
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Runs `work` on a pool with `jobs` threads (0 means the library default).
#[cfg(feature = "parallel")]
pub fn with_jobs<R: Send>(jobs: usize, work: impl FnOnce() -> R + Send) -> crate::Result<R> {
    if jobs == 0 {
        return Ok(work());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| crate::Error::Usage(format!("cannot build a {jobs}-thread pool: {e}")))?;
    Ok(pool.install(work))
}

#[cfg(not(feature = "parallel"))]
pub fn with_jobs<R: Send>(_jobs: usize, work: impl FnOnce() -> R + Send) -> crate::Result<R> {
    Ok(work())
}
