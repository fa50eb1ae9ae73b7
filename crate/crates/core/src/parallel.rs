//! Data-parallel dispatch with a sequential fallback.
//!
//! Work is always split into blocks of a fixed size, independent of the
//! number of worker threads, and every output element is produced by exactly
//! one block. Results are therefore bitwise identical between the sequential
//! and the parallel path.
//!
//! Without the `parallel` feature, [`Execution::Parallel`] degrades to the
//! sequential loop.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Makes [`Execution::auto`] return the sequential path process-wide.
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::Relaxed);
}

/// Output rows handled by one task in blocked kernels.
pub const ROW_BLOCK: usize = 64;

/// Elements handled by one task in elementwise kernels.
pub const ELEMENT_BLOCK: usize = 1 << 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Execution {
    /// Parallel when the crate is built with the `parallel` feature, unless
    /// [`force_sequential`] is on.
    pub fn auto() -> Self {
        if cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed) {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

impl Default for Execution {
    fn default() -> Self {
        Execution::auto()
    }
}

/// Calls `f(block_index, block)` for consecutive `block`-sized chunks of `data`.
pub fn for_each_block_mut<T, F>(exec: Execution, data: &mut [T], block: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let block = block.max(1);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && data.len() > block {
        data.par_chunks_mut(block)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
        return;
    }
    let _ = exec;
    data.chunks_mut(block)
        .enumerate()
        .for_each(|(i, chunk)| f(i, chunk));
}

/// Evaluates `f(0..n)` and collects the results in index order.
pub fn map_indexed<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Like [`map_indexed`] but bounded to at most `workers` threads.
///
/// `workers <= 1` always runs on the calling thread.
pub fn map_indexed_bounded<R, F>(workers: usize, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if workers > 1 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
    }
    let _ = workers;
    (0..n).map(f).collect()
}
