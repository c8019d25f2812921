//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature (default) items are spread over the rayon
//! pool; without it everything runs on the calling thread. Results always
//! come back in input order, so reductions over them are reproducible either
//! way. The `*_seq` variants are always sequential and exist for benchmarks.

/// Map `f` over `items`, keeping input order.
pub fn map<I, R, F>(items: &[I], f: F) -> Vec<R>
where
    I: Sync,
    R: Send,
    F: Fn(usize, &I) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_seq(items, f)
    }
}

pub fn map_seq<I, R, F>(items: &[I], f: F) -> Vec<R>
where
    F: Fn(usize, &I) -> R,
{
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Map `f` over `0..n`, keeping order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_range_seq(n, f)
    }
}

pub fn map_range_seq<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

/// Whether this build spreads work across threads.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
