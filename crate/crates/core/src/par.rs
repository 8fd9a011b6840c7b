//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper returns results in index order, so any reduction done by the
//! caller over the returned `Vec` is deterministic regardless of how many
//! worker threads ran.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// True when built with the `parallel` feature.
pub const PARALLEL: bool = cfg!(feature = "parallel");

/// Runs `f` on a dedicated pool of `threads` workers. Without the `parallel`
/// feature `f` simply runs on the calling thread.
#[cfg(feature = "parallel")]
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool")
        .install(f)
}

#[cfg(not(feature = "parallel"))]
pub fn with_threads<R: Send>(_threads: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}

/// Maps `f` over `0..n` and collects the results in index order.
#[cfg(feature = "parallel")]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Maps `f` over a slice and collects in order.
#[cfg(feature = "parallel")]
pub fn map_slice<'a, A, T, F>(items: &'a [A], f: F) -> Vec<T>
where
    A: Sync,
    T: Send,
    F: Fn(&'a A) -> T + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<'a, A, T, F>(items: &'a [A], f: F) -> Vec<T>
where
    A: Sync,
    T: Send,
    F: Fn(&'a A) -> T + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Maps `f` over consecutive chunks of `items` (the last may be short).
pub fn map_chunks<'a, A, T, F>(items: &'a [A], chunk: usize, f: F) -> Vec<T>
where
    A: Sync,
    T: Send,
    F: Fn(usize, &'a [A]) -> T + Sync + Send,
{
    assert!(chunk > 0, "chunk size must be positive");
    let n_chunks = items.len().div_ceil(chunk);
    map_range(n_chunks, |c| {
        let start = c * chunk;
        let end = (start + chunk).min(items.len());
        f(c, &items[start..end])
    })
}

/// Pairwise tree reduction in a fixed shape that depends only on `items.len()`.
pub fn tree_reduce<T, F>(mut items: Vec<T>, combine: F) -> Option<T>
where
    F: Fn(T, T) -> T,
{
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

/// Number of worker threads the helpers will use.
pub fn worker_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
