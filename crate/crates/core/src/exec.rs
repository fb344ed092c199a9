//! Chunked data-parallel execution.
//!
//! Batches are split into fixed-size chunks that are processed
//! independently. Chunk boundaries never depend on the thread count, and
//! partial results are always reduced in chunk order, so the `parallel`
//! feature changes wall-clock time but not a single bit of output.

use std::ops::Range;

/// Samples per chunk. Fixed so that reductions are reproducible.
pub const CHUNK: usize = 8;

/// Splits `0..n` into consecutive ranges of at most `chunk` items.
pub fn chunk_ranges(n: usize, chunk: usize) -> Vec<Range<usize>> {
    let chunk = chunk.max(1);
    (0..n.div_ceil(chunk))
        .map(|c| c * chunk..((c + 1) * chunk).min(n))
        .collect()
}

/// Runs `f` over every chunk on the calling thread.
pub fn map_chunks_seq<T, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    F: Fn(Range<usize>) -> T,
{
    chunk_ranges(n, chunk).into_iter().map(f).collect()
}

/// Runs `f` over every chunk on the rayon pool, preserving chunk order.
#[cfg(feature = "parallel")]
pub fn map_chunks_par<T, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    use rayon::prelude::*;
    chunk_ranges(n, chunk).into_par_iter().map(f).collect()
}

/// Dispatches to the parallel or sequential path depending on the build.
pub fn map_chunks<T, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_chunks_par(n, chunk, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_chunks_seq(n, chunk, f)
    }
}

/// Maps each item of a slice independently.
pub fn map_items<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
