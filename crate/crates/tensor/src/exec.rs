//! Execution-mode switch between data-parallel and sequential kernels.
//!
//! Every kernel partitions its output into disjoint chunks and computes each
//! chunk with a fixed per-element accumulation order, so parallel and
//! sequential execution produce bit-identical results. The mode can be
//! flipped at runtime (used by the benches to compare both paths); without
//! the `parallel` feature only the sequential path is compiled.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

#[cfg(feature = "parallel")]
const DEFAULT_MODE: u8 = 1;
#[cfg(not(feature = "parallel"))]
const DEFAULT_MODE: u8 = 0;

static MODE: AtomicU8 = AtomicU8::new(DEFAULT_MODE);

/// Selects the execution mode and returns the mode actually in effect.
/// Requesting `Parallel` without the `parallel` feature falls back to
/// `Sequential`.
pub fn set_exec_mode(mode: ExecMode) -> ExecMode {
    let v = match mode {
        ExecMode::Sequential => 0,
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => 1,
        #[cfg(not(feature = "parallel"))]
        ExecMode::Parallel => 0,
    };
    MODE.store(v, Ordering::Relaxed);
    exec_mode()
}

pub fn exec_mode() -> ExecMode {
    if MODE.load(Ordering::Relaxed) == 0 {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    }
}

/// Runs `f` over consecutive `chunk_len`-sized pieces of `out`, in parallel
/// when the parallel mode is active. `f` receives the chunk index and the
/// mutable chunk. The last chunk may be shorter.
pub fn for_each_chunk<F>(out: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    assert!(chunk_len > 0);
    match exec_mode() {
        ExecMode::Sequential => {
            for (i, chunk) in out.chunks_mut(chunk_len).enumerate() {
                f(i, chunk);
            }
        }
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, chunk)| f(i, chunk));
        }
        #[cfg(not(feature = "parallel"))]
        ExecMode::Parallel => unreachable!(),
    }
}

/// Runs `f(i)` for `i in 0..n`, in parallel when active. Only valid for
/// tasks that touch disjoint state.
pub fn for_each_index<F>(n: usize, f: F)
where
    F: Fn(usize) + Sync + Send,
{
    match exec_mode() {
        ExecMode::Sequential => {
            for i in 0..n {
                f(i);
            }
        }
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().for_each(f);
        }
        #[cfg(not(feature = "parallel"))]
        ExecMode::Parallel => unreachable!(),
    }
}
