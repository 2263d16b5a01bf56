//! Allocator tuning for the training loop.
//!
//! Every batch builds a tape holding tens of megabytes of activations and
//! gradients and drops it at the end. With glibc's default thresholds each
//! drop trims the heap (or unmaps large chunks) and the next batch faults
//! the pages back in, which costs about a third of the run time. Raising the
//! thresholds keeps that memory mapped between batches.

#[cfg(all(target_os = "linux", target_env = "gnu"))]
pub(crate) fn keep_heap_mapped() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        // SAFETY: mallopt only adjusts allocator parameters. 32 MiB is the
        // largest mmap threshold glibc accepts on 64-bit targets; a rejected
        // value leaves the defaults in place, which is merely slower.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        }
    });
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
pub(crate) fn keep_heap_mapped() {}
