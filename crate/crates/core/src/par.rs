//! Thin wrappers over the data-parallel loops used throughout the crate.
//!
//! With the default `parallel` feature the loops run on the rayon pool;
//! without it they degrade to plain sequential iteration. Every call site
//! writes to disjoint output chunks, so results are bit-identical in both
//! modes and for any thread count.

/// Apply `f` to each element of `items`, collecting results in input order.
pub fn map_collect<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Run `f` over mutable chunks of `data`, each `chunk_len` elements long.
///
/// `f` receives the chunk index and the chunk itself.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
}

/// Whether this build runs its inner loops on a thread pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
