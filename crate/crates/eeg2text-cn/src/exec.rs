//! Parallel map helpers.
//!
//! Batch gradients, corpus scoring, and PCA projection are all independent
//! per item, so they map cleanly onto rayon. Results are always collected in
//! input order and reduced sequentially by the callers, which keeps outputs
//! bit-identical regardless of thread count. Building with
//! `--no-default-features` removes rayon entirely and both entry points run
//! sequentially.

/// Maps `f` over `items`, in parallel when `parallel` is true and the
/// `parallel` feature is enabled. Output order always matches input order.
pub fn map_slice<T, U, F>(parallel: bool, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel && items.len() > 1 {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
    }
    let _ = parallel;
    items.iter().map(f).collect()
}

/// Indexed variant of [`map_slice`]; `f` receives `(index, item)`.
pub fn map_indexed<T, U, F>(parallel: bool, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallel && items.len() > 1 {
            use rayon::prelude::*;
            return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
        }
    }
    let _ = parallel;
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}
