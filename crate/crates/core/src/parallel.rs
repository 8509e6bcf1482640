//! Worker-count control for the tensor kernels.
//!
//! Kernels only ever split work over independent output slices (batch items,
//! output channels), never over a reduction, so every thread count produces
//! bitwise identical results. `0` means strictly serial execution.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;

pub const THREADS_ENV: &str = "STRIP_MLP_THREADS";

const UNSET: usize = usize::MAX;

static THREADS: AtomicUsize = AtomicUsize::new(UNSET);

fn pools() -> &'static Mutex<HashMap<usize, Arc<rayon::ThreadPool>>> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    POOLS.get_or_init(|| Mutex::new(HashMap::new()))
}

fn pool(threads: usize) -> Arc<rayon::ThreadPool> {
    let mut pools = pools().lock().expect("thread pool registry poisoned");
    Arc::clone(pools.entry(threads).or_insert_with(|| {
        Arc::new(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .thread_name(|i| format!("strip-mlp-{i}"))
                .build()
                .expect("failed to build worker pool"),
        )
    }))
}

/// Current worker count; read from `STRIP_MLP_THREADS` on first use.
pub fn threads() -> usize {
    let current = THREADS.load(Ordering::Relaxed);
    if current != UNSET {
        return current;
    }
    let from_env = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()).unwrap_or(0);
    THREADS.store(from_env, Ordering::Relaxed);
    from_env
}

pub fn set_threads(n: usize) {
    THREADS.store(n, Ordering::Relaxed);
}

/// Run `f` with `n` workers, restoring the previous setting afterwards.
pub fn with_threads<R>(n: usize, f: impl FnOnce() -> R) -> R {
    let previous = threads();
    set_threads(n);
    let out = f();
    set_threads(previous);
    out
}

/// Apply `f(index, chunk)` to consecutive `chunk_len` slices of `out`.
pub(crate) fn for_each_chunk<F>(out: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if chunk_len == 0 || out.is_empty() {
        return;
    }
    let n = threads();
    if n == 0 || out.len() / chunk_len < 2 {
        out.chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        pool(n).install(|| out.par_chunks_mut(chunk_len).enumerate().for_each(|(i, c)| f(i, c)));
    }
}

/// Map `0..count` to values, in index order.
pub(crate) fn map_indices<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    let n = threads();
    if n == 0 || count < 2 {
        (0..count).map(f).collect()
    } else {
        pool(n).install(|| (0..count).into_par_iter().map(f).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_results_do_not_depend_on_threads() {
        let run = |threads| {
            with_threads(threads, || {
                let mut out = vec![0.0; 64];
                for_each_chunk(&mut out, 8, |i, c| {
                    for (j, v) in c.iter_mut().enumerate() {
                        *v = (i * 8 + j) as f64 * 0.5;
                    }
                });
                out
            })
        };
        assert_eq!(run(0), run(4));
    }
}
