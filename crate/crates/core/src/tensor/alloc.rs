//! Thread-local accounting of live tensor-buffer bytes.
//!
//! Every [`Tensor`](super::Tensor) buffer reports its size here on creation
//! and on drop. Only tensor payloads are counted; allocator overhead, shape
//! vectors and stack usage are not.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn record_alloc(bytes: usize) {
    LIVE.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn record_free(bytes: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Bytes of tensor payload currently alive on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// Measures the high-water mark of tensor-buffer bytes allocated on the
/// current thread after the scope was started.
///
/// Scopes do not nest: starting a new one resets the peak.
#[derive(Debug)]
pub struct MemoryScope {
    baseline: usize,
}

impl MemoryScope {
    pub fn start() -> Self {
        let baseline = live_bytes();
        PEAK.with(|peak| peak.set(baseline));
        MemoryScope { baseline }
    }

    /// Peak live bytes above the level at which the scope started.
    pub fn peak_bytes(&self) -> usize {
        PEAK.with(Cell::get).saturating_sub(self.baseline)
    }

    /// Live bytes above the level at which the scope started.
    pub fn live_bytes(&self) -> usize {
        live_bytes().saturating_sub(self.baseline)
    }
}
