//! Opt-in data parallelism for the tensor kernels.
//!
//! Kernels split work over independent output rows or channels, so every
//! output element is produced by the same instruction sequence with or
//! without threads. Single-thread mode is the default.

use std::sync::atomic::{AtomicBool, Ordering};

static ENABLED: AtomicBool = AtomicBool::new(false);

/// Configures the worker count. `1` disables parallel kernels.
///
/// The rayon global pool can only be sized once per process; later calls
/// only toggle whether kernels use it.
pub fn set_threads(threads: usize) {
    let threads = threads.max(1);
    if threads > 1 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    ENABLED.store(threads > 1, Ordering::Relaxed);
}

pub fn enabled() -> bool {
    ENABLED.load(Ordering::Relaxed)
}

/// Runs `f` on each `chunk`-sized slice of `out` together with its index.
pub(crate) fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    use rayon::prelude::*;
    if chunk == 0 {
        return;
    }
    if enabled() {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}
