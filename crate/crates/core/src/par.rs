//! Deterministic parallel reductions.
//!
//! Sums are split into fixed-size chunks whose partial results are combined
//! in index order, so the result does not depend on the thread count.

use rayon::prelude::*;

const CHUNK: usize = 4096;

/// Sums `f(i)` for `i in 0..n` with a summation order fixed by `n` alone.
pub(crate) fn sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partial: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let end = ((c + 1) * CHUNK).min(n);
            let mut acc = 0.0;
            for i in c * CHUNK..end {
                acc += f(i);
            }
            acc
        })
        .collect();
    partial.into_iter().sum()
}

/// Like [`sum`] but accumulates several quantities at once.
pub(crate) fn sum_n<const K: usize, F>(n: usize, f: F) -> [f64; K]
where
    F: Fn(usize) -> [f64; K] + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partial: Vec<[f64; K]> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let end = ((c + 1) * CHUNK).min(n);
            let mut acc = [0.0; K];
            for i in c * CHUNK..end {
                let v = f(i);
                for k in 0..K {
                    acc[k] += v[k];
                }
            }
            acc
        })
        .collect();
    let mut out = [0.0; K];
    for p in partial {
        for k in 0..K {
            out[k] += p[k];
        }
    }
    out
}

/// Builds a vector by evaluating `f` at every index in parallel.
pub(crate) fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}
