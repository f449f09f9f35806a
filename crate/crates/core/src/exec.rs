//! Data-parallel execution over fixed-size row chunks.
//!
//! Work is always split into chunks of a size that does not depend on the
//! number of threads, and per-chunk results are returned in chunk order. A
//! reduction over those results is therefore bitwise identical whether it ran
//! sequentially or on a rayon pool of any size.

use std::ops::Range;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows per work unit for batched network evaluation.
pub const CHUNK_ROWS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Uses the rayon global pool; identical to `Sequential` when the
    /// `parallel` feature is disabled.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

fn chunk_ranges(n: usize, chunk: usize) -> impl Iterator<Item = Range<usize>> + Clone {
    let chunk = chunk.max(1);
    (0..n.div_ceil(chunk)).map(move |i| i * chunk..((i + 1) * chunk).min(n))
}

/// Apply `f` to consecutive index ranges of `0..n`, returning results in range order.
pub fn map_chunks<T, F>(exec: Execution, n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            let ranges: Vec<_> = chunk_ranges(n, chunk).collect();
            ranges.into_par_iter().map(f).collect()
        }
        _ => chunk_ranges(n, chunk).map(f).collect(),
    }
}

/// Run `f(item_index_range, out_chunk)` over disjoint chunks of `out`, where
/// each item owns `stride` consecutive output elements.
pub fn for_each_chunk_mut<T, F>(exec: Execution, out: &mut [T], stride: usize, chunk: usize, f: F)
where
    T: Send,
    F: Fn(Range<usize>, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    let span = chunk * stride.max(1);
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => out
            .par_chunks_mut(span)
            .enumerate()
            .for_each(|(i, c)| f(i * chunk..i * chunk + c.len() / stride.max(1), c)),
        _ => out
            .chunks_mut(span)
            .enumerate()
            .for_each(|(i, c)| f(i * chunk..i * chunk + c.len() / stride.max(1), c)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_cover_everything_in_order() {
        let got = map_chunks(Execution::Parallel, 10, 4, |r| r);
        assert_eq!(got, vec![0..4, 4..8, 8..10]);
        assert!(map_chunks(Execution::Sequential, 0, 4, |r| r).is_empty());
    }

    #[test]
    fn chunk_mut_matches_sequential() {
        let mut a = vec![0usize; 30];
        let mut b = vec![0usize; 30];
        let fill = |r: Range<usize>, c: &mut [usize]| {
            for (k, i) in r.enumerate() {
                c[3 * k] = i;
                c[3 * k + 1] = i * 2;
                c[3 * k + 2] = i * 3;
            }
        };
        for_each_chunk_mut(Execution::Parallel, &mut a, 3, 4, fill);
        for_each_chunk_mut(Execution::Sequential, &mut b, 3, 4, fill);
        assert_eq!(a, b);
        assert_eq!(&a[27..], &[9, 18, 27]);
    }
}
