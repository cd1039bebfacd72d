//! Data-parallel helpers with a sequential fallback.
//!
//! Reductions are always split into fixed-size chunks whose partial results
//! are combined in index order, so the parallel and sequential paths produce
//! bit-identical floating-point output.

/// How a batch loop should be executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise sequential.
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

/// Chunk length used by [`chunked_fold`].
pub const CHUNK: usize = 128;

/// Maps every item, preserving order.
pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

/// Maps every index in `0..n`, preserving order.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Runs `f` on every element in place.
pub fn for_each_mut<T, F>(exec: Execution, items: &mut [T], f: F)
where
    T: Send,
    F: Fn(&mut T) + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter_mut().for_each(f)
        }
        _ => items.iter_mut().for_each(f),
    }
}

/// Folds `items` chunk by chunk and merges the chunk accumulators in order.
pub fn chunked_fold<T, A, F, M>(exec: Execution, items: &[T], init: A, fold: F, merge: M) -> A
where
    T: Sync,
    A: Clone + Send + Sync,
    F: Fn(&mut A, &T) + Sync + Send,
    M: Fn(&mut A, &A),
{
    let fold_chunk = |chunk: &[T]| {
        let mut acc = init.clone();
        for item in chunk {
            fold(&mut acc, item);
        }
        acc
    };
    let partials: Vec<A> = match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_chunks(CHUNK).map(fold_chunk).collect()
        }
        _ => items.chunks(CHUNK).map(fold_chunk).collect(),
    };
    let mut total = init;
    for p in &partials {
        merge(&mut total, p);
    }
    total
}
