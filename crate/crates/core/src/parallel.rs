//! Deterministic parallel reduction helper.
//!
//! Work is split into a fixed number of index chunks regardless of how many
//! worker threads exist, partial results are collected in chunk order and
//! merged sequentially. Floating-point reductions therefore produce the same
//! bits no matter the thread count or schedule.

use rayon::prelude::*;

/// Fixed chunk count for deterministic reductions.
pub(crate) const CHUNKS: usize = 32;

/// Split `0..n` into [`CHUNKS`] ranges, map each in parallel and merge the
/// partial results in chunk order. Returns `None` when `n == 0`.
pub(crate) fn map_reduce_chunks<T, F, M>(n: usize, map: F, merge: M) -> Option<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync,
    M: Fn(T, T) -> T,
{
    if n == 0 {
        return None;
    }
    let n_chunks = CHUNKS.min(n);
    let chunk_len = n.div_ceil(n_chunks);
    let partials: Vec<T> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * chunk_len;
            let hi = ((c + 1) * chunk_len).min(n);
            map(lo..hi)
        })
        .collect();
    partials.into_iter().reduce(merge)
}
