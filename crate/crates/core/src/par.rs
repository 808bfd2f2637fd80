//! Data-parallel map helpers with a sequential fallback.
//!
//! Every data-parallel loop in the crate goes through `map_indexed`, which
//! dispatches to rayon when the `parallel` feature is enabled and to a plain
//! sequential loop otherwise. Each output slot is computed independently and
//! written to its own index, and floating-point reductions are always done
//! sequentially afterwards, so both builds produce bitwise-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Compute `f(0), f(1), ..., f(n-1)`, in parallel when enabled.
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

/// Sequential twin of [`map_indexed`], always single-threaded.
///
/// Kept as a public entry point so benchmarks can compare both paths within
/// one build.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Apply `f` to disjoint mutable chunks of `data`, in parallel when enabled.
///
/// `f` receives the chunk index and the chunk itself.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_matches_sequential() {
        let f = |i: usize| (i as f64).sqrt() * 3.0;
        assert_eq!(map_indexed(100, f), map_indexed_seq(100, f));
    }

    #[test]
    fn chunked_write_covers_all_slots() {
        let mut v = vec![0usize; 10];
        for_each_chunk_mut(&mut v, 3, |i, c| {
            for x in c.iter_mut() {
                *x = i + 1;
            }
        });
        assert_eq!(v, vec![1, 1, 1, 2, 2, 2, 3, 3, 3, 4]);
    }
}
