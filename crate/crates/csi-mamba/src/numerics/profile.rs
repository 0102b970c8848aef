//! Instrumentation counters: live tensor bytes and multiply-accumulate counts.
//!
//! Both counters are thread-local, matching the single-threaded tape model.
//! Tensor storage registers itself on allocation and deregisters on drop, so
//! the byte counter tracks *live* buffers; the benchmark harness reads the
//! high-water mark over a measurement window. Kernels add to the MAC counter
//! as they run.

use std::cell::Cell;

thread_local! {
    static LIVE_BYTES: Cell<usize> = const { Cell::new(0) };
    static PEAK_BYTES: Cell<usize> = const { Cell::new(0) };
    static MAC_COUNT: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn mem_acquire(bytes: usize) {
    LIVE_BYTES.with(|c| {
        let live = c.get() + bytes;
        c.set(live);
        PEAK_BYTES.with(|p| {
            if live > p.get() {
                p.set(live);
            }
        });
    });
}

pub(crate) fn mem_release(bytes: usize) {
    LIVE_BYTES.with(|c| c.set(c.get().saturating_sub(bytes)));
}

/// Currently live tensor bytes on this thread.
pub fn live_bytes() -> usize {
    LIVE_BYTES.with(|c| c.get())
}

/// Peak live tensor bytes within `f`, relative to the bytes live at entry.
///
/// Pre-existing buffers (model parameters in particular) are excluded: the
/// peak is reset to the current level before `f` runs and the baseline is
/// subtracted from the result.
pub fn measure_peak_bytes<R>(f: impl FnOnce() -> R) -> (usize, R) {
    let baseline = live_bytes();
    PEAK_BYTES.with(|p| p.set(baseline));
    let out = f();
    let peak = PEAK_BYTES.with(|p| p.get());
    (peak.saturating_sub(baseline), out)
}

pub(crate) fn add_macs(n: u64) {
    MAC_COUNT.with(|c| c.set(c.get() + n));
}

/// Multiply-accumulate operations recorded within `f`.
///
/// Matmul-like kernels count one MAC per scalar multiply; elementwise
/// activations count one per element. The absolute value is a convention;
/// scaling comparisons only rely on it being applied consistently.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (u64, R) {
    let start = MAC_COUNT.with(|c| c.get());
    let out = f();
    let end = MAC_COUNT.with(|c| c.get());
    (end - start, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_window_measures_zero() {
        let (peak, ()) = measure_peak_bytes(|| ());
        assert_eq!(peak, 0);
        let (macs, ()) = count_macs(|| ());
        assert_eq!(macs, 0);
    }

    #[test]
    fn peak_tracks_transient_allocations() {
        let (peak, ()) = measure_peak_bytes(|| {
            mem_acquire(1000);
            mem_release(1000);
            mem_acquire(400);
            mem_release(400);
        });
        assert_eq!(peak, 1000);
    }
}
