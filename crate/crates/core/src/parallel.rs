//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the mapping helpers fan work out
//! over rayon; without it they run sequentially. Both paths visit indices
//! in the same order when results are combined, so outputs are
//! bit-identical regardless of feature flags or thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk width used when folding per-sample results into one accumulator.
/// Fixed (not tied to thread count) so the reduction order is stable.
pub const CHUNK: usize = 8;

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Same as [`map_indexed`] but forced sequential; kept available in all
/// builds so benchmarks can compare the two execution modes directly.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Map `f` over fixed-width chunks of `0..n` and fold the per-chunk results
/// left to right. Each chunk covers consecutive indices, so the overall
/// combination order is `(0..CHUNK), (CHUNK..2*CHUNK), ...` no matter how
/// the chunks were scheduled.
pub fn map_chunks<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    let ranges: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(CHUNK)
        .map(|start| start..(start + CHUNK).min(n))
        .collect();
    #[cfg(feature = "parallel")]
    {
        ranges.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        ranges.into_iter().map(f).collect()
    }
}

/// Sequential counterpart of [`map_chunks`] with the identical chunking and
/// fold order.
pub fn map_chunks_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(std::ops::Range<usize>) -> T,
{
    (0..n)
        .step_by(CHUNK)
        .map(|start| f(start..(start + CHUNK).min(n)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_matches_sequential() {
        let f = |r: std::ops::Range<usize>| r.map(|i| (i as f64).sin()).sum::<f64>();
        let par: f64 = map_chunks(100, f).into_iter().sum();
        let seq: f64 = map_chunks_seq(100, f).into_iter().sum();
        assert_eq!(par.to_bits(), seq.to_bits());
    }

    #[test]
    fn map_preserves_order() {
        let out = map_indexed(10, |i| i * i);
        assert_eq!(out, vec![0, 1, 4, 9, 16, 25, 36, 49, 64, 81]);
    }
}
