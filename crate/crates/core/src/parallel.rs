//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature (default) work fans out over rayon; without
//! it every call runs sequentially. Results keep input order either way, so
//! output never depends on scheduling.

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "SEGFUSE_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

pub fn map_sequential<T, R>(items: &[T], f: impl Fn(&T) -> R) -> Vec<R> {
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_parallel<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_parallel<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_sequential(items, f)
}

pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match exec {
        Execution::Sequential => map_sequential(items, f),
        Execution::Parallel => map_parallel(items, f),
    }
}

/// Thread cap from `SEGFUSE_THREADS`, if set to a positive integer.
pub fn thread_limit_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Runs `f` with parallel maps limited to `threads` workers.
#[cfg(feature = "parallel")]
pub fn with_thread_limit<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_thread_limit<R: Send>(_threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    f()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential_order() {
        let items: Vec<u64> = (0..200).collect();
        let f = |x: &u64| x.wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 7;
        assert_eq!(
            map(Execution::Parallel, &items, f),
            map(Execution::Sequential, &items, f)
        );
    }

    #[test]
    fn thread_limit_runs_closure() {
        assert_eq!(with_thread_limit(Some(2), || 41 + 1), 42);
    }
}
