//! Execution-mode selection for batch workloads.
//!
//! Batch work (sampling, Monte-Carlo reduction, grid sweeps) is split into
//! fixed-size chunks indexed `0..n_chunks`. Chunks are computed either on the
//! rayon thread pool or on the calling thread, and results are always
//! collected in chunk order, so the two modes produce bit-identical output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// How a batch workload is executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    /// Run all chunks on the calling thread, in order.
    Sequential,
    /// Run chunks on the rayon pool. Without the `parallel` feature this
    /// falls back to sequential execution.
    Parallel,
}

impl ExecMode {
    /// The default mode: parallel when the `parallel` feature is enabled.
    pub fn auto() -> Self {
        if cfg!(feature = "parallel") {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        }
    }
}

impl Default for ExecMode {
    fn default() -> Self {
        ExecMode::auto()
    }
}

/// Apply `f` to every chunk index and collect the results in index order.
pub fn map_chunks<T, F>(n_chunks: usize, mode: ExecMode, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n_chunks).map(f).collect(),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => (0..n_chunks).into_par_iter().map(f).collect(),
        #[cfg(not(feature = "parallel"))]
        ExecMode::Parallel => (0..n_chunks).map(f).collect(),
    }
}

/// Number of samples handled per chunk in batch samplers and reducers.
///
/// Fixed so that chunk boundaries (and therefore RNG stream assignment and
/// floating-point reduction order) never depend on thread count.
pub const CHUNK_SIZE: usize = 8192;
