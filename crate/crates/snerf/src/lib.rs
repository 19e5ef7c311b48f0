//! File formats, datasets, training runs and evaluation on top of
//! `snerf-core`.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod eval;
pub mod io;
pub mod render;
pub mod train;

/// A thread pool with `workers` threads (at least one).
pub fn pool(workers: usize) -> anyhow::Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?)
}
