//! Threading mode for the compute kernels.
//!
//! Every kernel accumulates each output element in a fixed order, so the
//! parallel and sequential paths produce bit-identical results; the switch
//! exists to honour the strict single-thread contract (`PLUNET_THREADS=0`)
//! and to bound worker count elsewhere.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

/// 0 means strictly sequential; anything else is a rayon worker budget.
static THREADS: AtomicUsize = AtomicUsize::new(0);
static POOL_INIT: OnceLock<()> = OnceLock::new();

/// Applies the `PLUNET_THREADS` convention: `0` forces the sequential
/// paths, `n > 0` builds a global rayon pool with `n` workers, unset
/// callers can pass the machine's parallelism.
pub fn set_threads(n: usize) {
    THREADS.store(n, Ordering::SeqCst);
    if n > 1 {
        POOL_INIT.get_or_init(|| {
            // Ignore the error: the global pool can only be built once.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        });
    }
}

pub fn threads() -> usize {
    THREADS.load(Ordering::SeqCst)
}

/// True when kernels should take their rayon paths.
pub(crate) fn parallel() -> bool {
    THREADS.load(Ordering::SeqCst) > 1
}

/// Reads `PLUNET_THREADS` and applies it; unset leaves the sequential
/// default in place.
pub fn init_from_env() {
    if let Ok(v) = std::env::var("PLUNET_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            set_threads(n);
        }
    }
}
