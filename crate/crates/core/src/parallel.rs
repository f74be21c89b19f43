//! Deterministic parallelism helpers.
//!
//! Every reduction in the crate goes through fixed-size chunks whose partial
//! results are combined in chunk order, so results are bit-identical across
//! thread counts. Element-wise maps over disjoint output slices are
//! scheduling-independent by construction.

use rayon::prelude::*;

/// Chunk length used by all deterministic reductions. Independent of the
/// active thread count.
pub const CHUNK: usize = 4096;

/// Run `f` inside a rayon pool with `threads` workers (0 = current pool).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("failed to build thread pool");
    pool.install(f)
}

/// Map `f` over chunk indices `0..n_chunks` in parallel; the result vector is
/// ordered by chunk index regardless of scheduling.
pub fn map_chunks<R: Send>(n_chunks: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    (0..n_chunks).into_par_iter().map(f).collect()
}

pub fn n_chunks(len: usize) -> usize {
    len.div_ceil(CHUNK)
}

/// Deterministic sum of `f(i)` over `0..len` in f64.
pub fn sum_indexed(len: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    let partials = map_chunks(n_chunks(len), |c| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(len);
        let mut acc = 0.0;
        for i in lo..hi {
            acc += f(i);
        }
        acc
    });
    partials.into_iter().sum()
}

/// Parallel in-place map over equally sized rows of `data`.
pub fn for_each_row_mut<T: Send>(data: &mut [T], row_len: usize, f: impl Fn(usize, &mut [T]) + Sync) {
    if row_len == 0 {
        return;
    }
    data.par_chunks_mut(row_len)
        .enumerate()
        .for_each(|(i, row)| f(i, row));
}
