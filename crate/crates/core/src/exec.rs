//! Execution-mode helpers: rayon data parallelism with a sequential
//! fallback.
//!
//! All hot loops in this crate are expressed as order-preserving maps over
//! an index range or a slice, so the parallel and sequential paths produce
//! bit-identical results. With the `parallel` feature (default) the
//! [`Parallelism::Rayon`] mode fans work out over the rayon pool; without
//! it everything degrades to plain iteration. Benchmarks select the mode
//! at runtime to compare both on one build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How to execute data-parallel loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parallelism {
    /// Plain single-threaded iteration.
    Sequential,
    /// Rayon work-stealing pool. Falls back to sequential when the crate
    /// is built without the `parallel` feature.
    Rayon,
}

impl Default for Parallelism {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Parallelism::Rayon
        } else {
            Parallelism::Sequential
        }
    }
}

/// Maps `f` over `0..n`, preserving index order in the output.
pub fn map_indexed<T, F>(mode: Parallelism, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        Parallelism::Sequential => (0..n).map(f).collect(),
        Parallelism::Rayon => {
            #[cfg(feature = "parallel")]
            {
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..n).map(f).collect()
            }
        }
    }
}

/// Maps `f` over the items of a slice, preserving order.
pub fn map_slice<I, T, F>(mode: Parallelism, items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    match mode {
        Parallelism::Sequential => items.iter().map(f).collect(),
        Parallelism::Rayon => {
            #[cfg(feature = "parallel")]
            {
                items.par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                items.iter().map(f).collect()
            }
        }
    }
}

/// Maps `f` over fixed-size chunks of `0..n` and returns one result per
/// chunk, in chunk order.
///
/// Chunk boundaries depend only on `n` and `chunk_size`, never on thread
/// scheduling, so a fold over the returned vector is deterministic. This
/// is how gradient accumulation stays bit-exact across thread counts.
pub fn map_chunks<T, F>(mode: Parallelism, n: usize, chunk_size: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
{
    assert!(chunk_size > 0, "chunk_size must be positive");
    let ranges: Vec<_> = (0..n)
        .step_by(chunk_size)
        .map(|start| start..(start + chunk_size).min(n))
        .collect();
    match mode {
        Parallelism::Sequential => ranges.into_iter().map(f).collect(),
        Parallelism::Rayon => {
            #[cfg(feature = "parallel")]
            {
                ranges.into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                ranges.into_iter().map(f).collect()
            }
        }
    }
}
