//! Deterministic parallel reductions.
//!
//! Work is split into fixed-size chunks that do not depend on the worker
//! count; partial results are combined in chunk order, so outputs are
//! bit-identical for any number of threads.

use rayon::prelude::*;

/// Default chunk length for row-parallel reductions.
pub const CHUNK: usize = 2048;

/// Configure the global worker pool. Returns the effective thread count.
/// Safe to call more than once; only the first call takes effect.
pub fn set_threads(threads: Option<usize>) -> usize {
    if let Some(t) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    rayon::current_num_threads()
}

/// Sum `f(i)` over `0..n` with fixed chunking.
pub fn sum_chunks<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<f64> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n);
            let mut s = 0.0;
            for i in lo..hi {
                s += f(i);
            }
            s
        })
        .collect();
    partials.iter().sum()
}

/// Accumulate a `dim`-length vector over `0..n` with fixed chunking.
/// `f(i, acc)` adds row `i`'s contribution into `acc`.
pub fn sum_vec_chunks<F>(n: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<Vec<f64>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n);
            let mut acc = vec![0.0; dim];
            for i in lo..hi {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; dim];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    total
}
