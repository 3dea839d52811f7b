//! Data-parallel execution with a fixed reduction order.
//!
//! Work over `0..len` is cut into contiguous chunks of [`CHUNK_LEN`] items.
//! Each chunk is folded sequentially, and chunk results are combined left to
//! right. The chunking does not depend on the execution mode, so
//! `Sequential` and `Parallel` produce bit-identical results.

use std::ops::Range;

/// Items per chunk in [`chunked_reduce`].
pub const CHUNK_LEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise runs
    /// sequentially.
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

fn chunk_ranges(len: usize, chunk_len: usize) -> Vec<Range<usize>> {
    (0..len)
        .step_by(chunk_len.max(1))
        .map(|start| start..(start + chunk_len).min(len))
        .collect()
}

/// Maps every chunk of `0..len` and reduces the chunk results in index order.
/// Returns `None` when `len == 0`.
pub fn chunked_reduce<A, M, R>(exec: Execution, len: usize, map: M, reduce: R) -> Option<A>
where
    A: Send,
    M: Fn(Range<usize>) -> A + Sync + Send,
    R: FnMut(A, A) -> A,
{
    let ranges = chunk_ranges(len, CHUNK_LEN);
    let parts = map_ordered(exec, ranges, map);
    parts.into_iter().reduce(reduce)
}

/// Applies `f` to every item, preserving input order in the output.
pub fn map_ordered<T, U, F>(exec: Execution, items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.into_par_iter().map(f).collect()
        }
        _ => items.into_iter().map(f).collect(),
    }
}
