//! Ordered data-parallel map with a sequential fallback.
//!
//! Results always come back in input order, so any reduction the caller
//! performs over them is identical across worker counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Runs per-item closures on a private rayon pool, or inline when built
/// without the `parallel` feature or asked for a single worker.
pub struct Executor {
    workers: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("workers", &self.workers()).finish()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Executor {
            workers: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// `workers == 0` uses every available core.
    pub fn new(workers: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            if workers == 1 {
                return Self::sequential();
            }
            let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().ok();
            let workers = pool.as_ref().map_or(1, |p| p.current_num_threads());
            Executor { workers, pool }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = workers;
            Self::sequential()
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect());
        }
        items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::sequential()
    }
}
