//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper returns results in index order, so reductions performed by the
//! caller over the returned vectors are independent of the thread count. With
//! the `parallel` feature disabled, or after [`set_parallel(false)`], all work
//! runs on the calling thread.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enables or disables parallel execution at runtime.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

/// Whether helpers in this module currently fan out to the thread pool.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Configures the global pool size. `1` also switches to sequential mode.
pub fn configure_threads(threads: usize) {
    if threads <= 1 {
        set_parallel(false);
        return;
    }
    set_parallel(true);
    #[cfg(feature = "parallel")]
    {
        // A second call after the pool exists is a no-op.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Applies `f` to each chunk of `data` (of `chunk` elements) with its index.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && data.len() > chunk {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
