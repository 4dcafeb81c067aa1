//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the closures run on the rayon pool unless
//! `strict` is set; without it everything is sequential. Every caller maps
//! independent work items, so both paths give identical results.

/// `(0..n).map(f)`, possibly in parallel, results in index order.
pub fn map_indices<T, F>(n: usize, strict: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !strict {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = strict;
    (0..n).map(f).collect()
}

/// Whether [`map_indices`] can actually run in parallel in this build.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Runs `f` on a pool of `workers` threads (the calling thread when
/// `strict` or without the `parallel` feature).
pub fn with_workers<T, F>(workers: usize, strict: bool, f: F) -> T
where
    T: Send,
    F: FnOnce() -> T + Send,
{
    #[cfg(feature = "parallel")]
    if !strict {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
            return pool.install(f);
        }
    }
    let _ = (workers, strict);
    f()
}
