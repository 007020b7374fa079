//! Deterministic data-parallel helpers.
//!
//! Reductions split the index range into fixed-size chunks, sum each chunk
//! sequentially and then combine the partial sums in chunk order. The result
//! is therefore bit-identical for any thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub(crate) const CHUNK: usize = 4096;

/// `Σ f(i)` for `i in 0..n`, accumulated in f64 with a fixed summation order.
pub fn sum_f64<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    let partials: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut s = 0.0f64;
            for i in lo..hi {
                s += f(i);
            }
            s
        })
        .collect();
    partials.iter().sum()
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    sum_f64(a.len(), |i| a[i] as f64 * b[i] as f64)
}

pub fn norm_sq(a: &[f32]) -> f64 {
    sum_f64(a.len(), |i| {
        let v = a[i] as f64;
        v * v
    })
}

/// Runs `f` inside a rayon pool with `threads` workers (`None` = rayon default).
pub fn with_threads<R, F>(threads: Option<usize>, f: F) -> Result<R>
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}
