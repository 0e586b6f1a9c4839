//! Execution backend for per-client work. With the `parallel` feature the
//! dispatching map runs on a rayon pool sized by `DQNFED_THREADS`
//! (0 or unset = one worker per core); without it, plain iteration.
//! Both paths preserve input order, so downstream reductions see the
//! same sequence either way.

#[cfg(feature = "parallel")]
use std::sync::OnceLock;

/// Worker cap from the environment. 0 means auto.
pub fn configured_threads() -> usize {
    std::env::var("DQNFED_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0)
}

#[cfg(feature = "parallel")]
fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(configured_threads())
            .build()
            .expect("failed to build worker pool")
    })
}

/// Order-preserving map, sequential implementation.
pub fn map_ordered_seq<I, T, F>(items: Vec<I>, f: F) -> Vec<T>
where
    F: Fn(I) -> T,
{
    items.into_iter().map(f).collect()
}

/// Order-preserving map on the shared worker pool.
#[cfg(feature = "parallel")]
pub fn map_ordered_par<I, T, F>(items: Vec<I>, f: F) -> Vec<T>
where
    I: Send,
    T: Send,
    F: Fn(I) -> T + Sync + Send,
{
    use rayon::prelude::*;
    pool().install(|| items.into_par_iter().map(f).collect())
}

/// Order-preserving map over independent work items; parallel when the
/// feature is enabled, sequential otherwise.
#[cfg(feature = "parallel")]
pub fn map_ordered<I, T, F>(items: Vec<I>, f: F) -> Vec<T>
where
    I: Send,
    T: Send,
    F: Fn(I) -> T + Sync + Send,
{
    map_ordered_par(items, f)
}

/// Order-preserving map over independent work items; parallel when the
/// feature is enabled, sequential otherwise.
#[cfg(not(feature = "parallel"))]
pub fn map_ordered<I, T, F>(items: Vec<I>, f: F) -> Vec<T>
where
    I: Send,
    T: Send,
    F: Fn(I) -> T + Sync + Send,
{
    map_ordered_seq(items, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let input: Vec<u64> = (0..1000).collect();
        let out = map_ordered(input.clone(), |x| x * 3);
        assert_eq!(out, input.iter().map(|x| x * 3).collect::<Vec<_>>());
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matches_sequential_bitwise() {
        // Per-item float work must not depend on scheduling.
        let input: Vec<u64> = (0..257).collect();
        let work = |x: u64| {
            let mut acc = x as f64 * 0.1;
            for i in 1..50 {
                acc = (acc * 1.000001 + i as f64).sin();
            }
            acc
        };
        let a = map_ordered_par(input.clone(), work);
        let b = map_ordered_seq(input, work);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
