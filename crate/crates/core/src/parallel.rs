//! Data-parallel helpers. The `parallel` feature selects rayon; without it
//! every helper runs sequentially. `force_sequential` flips the same switch
//! at runtime so benches and equivalence tests can compare both paths in
//! one binary. Callers must only use these helpers for disjoint-write or
//! order-insensitive work so both paths produce identical bytes.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Route all subsequent helper calls through the sequential path (true)
/// or restore the compiled default (false).
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Apply `f(chunk_index, chunk)` over mutually disjoint equal-size chunks of `data`.
/// `chunk_len` must divide `data.len()`.
pub fn for_each_chunk_mut<F>(data: &mut [f32], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    assert!(chunk_len > 0 && data.len() % chunk_len == 0);
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
        return;
    }
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}

/// Map `f` over 0..n and sum the results. Summation order differs between the
/// two paths, so this is for integer-like payloads only (exact addition).
pub fn sum_over<F>(n: usize, f: F) -> u64
where
    F: Fn(usize) -> u64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(&f).sum();
    }
    (0..n).map(f).sum()
}
