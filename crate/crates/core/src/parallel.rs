//! Optional data parallelism for independent solves.
//!
//! The worker count comes from the `DIFFTUNE_THREADS` environment variable;
//! when it is unset, unparsable or `1`, maps run sequentially so results are
//! produced in a fixed order on a single thread.

use once_cell::sync::Lazy;
use rayon::prelude::*;

pub const THREADS_ENV: &str = "DIFFTUNE_THREADS";

static POOL: Lazy<Option<rayon::ThreadPool>> = Lazy::new(|| {
    let threads = std::env::var(THREADS_ENV).ok()?.trim().parse::<usize>().ok()?;
    if threads <= 1 {
        return None;
    }
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().ok()
});

/// Number of workers used by [`map`].
pub fn thread_count() -> usize {
    POOL.as_ref().map_or(1, |p| p.current_num_threads())
}

/// Applies `f` to every item, preserving order.
pub fn map<I, R, F>(items: &[I], f: F) -> Vec<R>
where
    I: Sync,
    R: Send,
    F: Fn(&I) -> R + Sync + Send,
{
    match POOL.as_ref() {
        Some(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        None => items.iter().map(f).collect(),
    }
}
