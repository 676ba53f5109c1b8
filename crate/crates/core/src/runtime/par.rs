//! Data-parallel helpers. With the `parallel` feature, work is spread over the
//! rayon pool; without it (or after `set_parallel(false)`) everything runs on
//! the calling thread. Each output element is always computed by the same
//! sequential loop, so results do not depend on the thread count.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Enables or disables parallel execution at runtime. Has no effect when the
/// crate is built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    ENABLED.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Calls `f(index, chunk)` for every `chunk`-sized piece of `out`.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk == 0 || out.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// `(0..n).map(f).collect()`, in order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
