//! Seed-level data parallelism. Each run is single-threaded and shares
//! nothing, so seeds map independently; results keep seed order either way.

use std::ops::Range;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Uses rayon when the `parallel` feature is on, otherwise sequential.
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

pub fn map_seeds<T, F>(seeds: Range<u64>, exec: Execution, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    match exec {
        Execution::Sequential => seeds.map(f).collect(),
        Execution::Parallel => parallel_map(seeds, f),
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T: Send, F: Fn(u64) -> T + Sync + Send>(seeds: Range<u64>, f: F) -> Vec<T> {
    use rayon::prelude::*;
    seeds.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T: Send, F: Fn(u64) -> T + Sync + Send>(seeds: Range<u64>, f: F) -> Vec<T> {
    seeds.map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree_and_keep_order() {
        let f = |s: u64| s * s + 1;
        let a = map_seeds(0..500, Execution::Sequential, f);
        let b = map_seeds(0..500, Execution::Parallel, f);
        assert_eq!(a, b);
        assert_eq!(a[7], 50);
        assert!(map_seeds(5..5, Execution::Parallel, f).is_empty());
    }
}
