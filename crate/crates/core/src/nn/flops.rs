//! Thread-local multiply-add counter fed by the layers in this module.

use std::cell::Cell;

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

pub fn add(n: u64) {
    FLOPS.with(|f| f.set(f.get().wrapping_add(n)));
}

pub fn reset() {
    FLOPS.with(|f| f.set(0));
}

pub fn get() -> u64 {
    FLOPS.with(|f| f.get())
}

/// Runs `f` and returns its result with the FLOPs it recorded.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = get();
    let r = f();
    (r, get().wrapping_sub(before))
}
