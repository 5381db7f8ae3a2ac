//! Ordered fan-out over scoped threads.

use crate::error::Result;

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "CTXREG_WORKERS";

pub fn workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Applies `f` to contiguous chunks of `items` on up to [`workers`] threads
/// and concatenates the results in input order. `f` must return one output
/// per input.
pub fn map_chunks<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> Result<Vec<R>> + Sync,
{
    let n = workers().min(items.len()).max(1);
    if n == 1 {
        return f(items);
    }
    let size = items.len().div_ceil(n);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(size)
            .map(|chunk| scope.spawn(|| f(chunk)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
