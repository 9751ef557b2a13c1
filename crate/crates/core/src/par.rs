//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool;
//! without it, or with [`Execution::Sequential`], the same closures run on
//! the calling thread. Chunk boundaries and the final reduction order do not
//! depend on the execution mode, so results are bitwise identical either way.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// True when work will actually fan out to a thread pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Applies `f` to consecutive chunks of `items` and returns the per-chunk
/// results in chunk order.
pub fn map_chunks<T, R, F>(exec: Execution, items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_chunks(chunk).map(&f).collect();
    }
    let _ = exec;
    items.chunks(chunk).map(f).collect()
}

/// Ordered parallel map over an index range.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(&f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_results_are_ordered_and_mode_independent() {
        let xs: Vec<f64> = (0..10_000).map(|i| (i as f64).sin()).collect();
        let sum = |c: &[f64]| c.iter().sum::<f64>();
        let a = map_chunks(Execution::Parallel, &xs, 97, sum);
        let b = map_chunks(Execution::Sequential, &xs, 97, sum);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10_000usize.div_ceil(97));
    }

    #[test]
    fn range_map_keeps_order() {
        let v = map_range(Execution::Parallel, 100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
    }
}
