//! Thin data-parallel layer.
//!
//! With the `parallel` feature (default) the helpers dispatch to rayon; without
//! it they fall back to plain sequential iteration. Every helper writes to
//! disjoint output slots or returns results in index order, so the numerical
//! result never depends on the number of worker threads.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Calls `f(index, chunk)` for every `chunk_len`-sized piece of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
}

/// Maps `0..n` through `f`, returning results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
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

/// Consumes `items`, calling `f(scratch, index, item)` with a scratch value
/// created by `init` once per worker; results come back in index order.
pub fn map_with_scratch<I, S, R, G, F>(items: Vec<I>, init: G, f: F) -> Vec<R>
where
    I: Send,
    R: Send,
    G: Fn() -> S + Send + Sync,
    F: Fn(&mut S, usize, I) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().enumerate().map_init(init, |s, (i, item)| f(s, i, item)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let mut s = init();
        items.into_iter().enumerate().map(|(i, item)| f(&mut s, i, item)).collect()
    }
}

/// Runs `f` on a dedicated pool of `threads` workers. `threads == 0` uses the
/// global pool. Without the `parallel` feature this just calls `f`.
pub fn with_threads<R, F>(threads: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            return f();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

/// Worker count visible to the helpers above in the current context.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_everything_once() {
        let mut v = vec![0u32; 103];
        for_each_chunk_mut(&mut v, 10, |i, c| {
            for x in c.iter_mut() {
                *x += i as u32 + 1;
            }
        });
        assert_eq!(v[0], 1);
        assert_eq!(v[102], 11);
        assert!(v.iter().all(|&x| x > 0));
    }

    #[test]
    fn map_keeps_order() {
        let out = with_threads(2, || map_indexed(50, |i| i * i));
        assert_eq!(out, (0..50).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn single_thread_pool_reports_one() {
        let n = with_threads(1, current_threads);
        assert_eq!(n, 1);
    }
}
