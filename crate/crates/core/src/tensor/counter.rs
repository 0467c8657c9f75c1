//! Thread-local multiply-accumulate counter fed by the direct (reference)
//! kernels. The fast kernels never touch it.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub fn reset() {
    MACS.with(|m| m.set(0));
}

pub fn read() -> u64 {
    MACS.with(|m| m.get())
}

pub(crate) fn add(n: u64) {
    MACS.with(|m| m.set(m.get() + n));
}

/// Runs `f` with a zeroed counter and returns its result plus the number of
/// multiplies executed. The previous counter value is restored afterwards.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let saved = read();
    reset();
    let out = f();
    let n = read();
    MACS.with(|m| m.set(saved));
    (out, n)
}
