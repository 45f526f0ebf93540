//! Data-parallel helpers.
//!
//! With the `parallel` feature (on by default) these fan out over rayon's
//! pool; without it, or when disabled at runtime through [`set_enabled`],
//! they run the same closures sequentially. Every helper writes results by
//! index, so output is identical either way.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Rows below this count are processed sequentially even when parallelism
/// is on.
#[cfg(feature = "parallel")]
const MIN_PAR_ITEMS: usize = 64;

/// Toggles parallel execution at runtime. Has no effect without the
/// `parallel` feature.
pub fn set_enabled(on: bool) {
    ENABLED.store(on, Ordering::Relaxed);
}

/// Whether helpers currently fan out.
pub fn enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Calls `f(row_index, row)` for each `row_len`-sized chunk of `data`.
pub fn for_each_row_mut<F>(data: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if enabled() && data.len() / row_len >= MIN_PAR_ITEMS {
        use rayon::prelude::*;
        data.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
        return;
    }
    data.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
}

/// Maps `f` over `0..n`, preserving index order in the output.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if enabled() && n >= 2 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, preserving order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_range(items.len(), |i| f(&items[i]))
}

/// Runs `op` on a dedicated pool of `workers` threads (0 = rayon default).
/// Sequential builds just run `op`.
pub fn with_workers<R, F>(workers: usize, op: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    if workers > 0 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            return pool.install(op);
        }
    }
    let _ = workers;
    op()
}
