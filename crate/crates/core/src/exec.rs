//! Execution-mode switch for data-parallel batch operations.
//!
//! Heavy entry points (metric sweeps, dataset construction, batched
//! generation, gradient accumulation) fan out per item. With the
//! `parallel` feature they can run on the rayon pool; without it, or with
//! [`Parallelism::Sequential`], they run on the calling thread. Either way
//! the output order is the input order, so results are identical across
//! modes.

/// How a batch operation distributes its per-item work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    /// Run every item on the calling thread.
    Sequential,
    /// Use the rayon pool. Falls back to sequential when the crate was
    /// built without the `parallel` feature.
    #[default]
    Parallel,
}

/// Maps `f` over `items`, preserving input order in the output.
pub fn map_items<T, U, F>(mode: Parallelism, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    match mode {
        Parallelism::Sequential => items.iter().map(f).collect(),
        Parallelism::Parallel => {
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
    }
}

/// Maps `f` over an index range, preserving index order in the output.
pub fn map_indices<U, F>(mode: Parallelism, count: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match mode {
        Parallelism::Sequential => (0..count).map(f).collect(),
        Parallelism::Parallel => {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                (0..count).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..count).map(f).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_preserve_order() {
        let items: Vec<u64> = (0..100).collect();
        let seq = map_items(Parallelism::Sequential, &items, |x| x * 2);
        let par = map_items(Parallelism::Parallel, &items, |x| x * 2);
        assert_eq!(seq, par);
        assert_eq!(seq[3], 6);
    }
}
