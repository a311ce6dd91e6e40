//! Double-precision reverse-mode autodiff with deterministic CPU kernels.
//!
//! Design points:
//! - all math in `f64`; a forward pass is a pure function of (parameters,
//!   inputs), so identical seeds reproduce identical bits;
//! - kernels split work into disjoint output chunks with a fixed per-element
//!   accumulation order, making parallel and sequential execution
//!   bit-identical (see [`exec`]);
//! - random streams are derived from (master seed, purpose tags) instead of
//!   carrying generator state around (see [`rng`]).

pub mod exec;
pub mod fd;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod rng;

pub use exec::{exec_mode, set_exec_mode, ExecMode};
pub use graph::{BatchStats, Gradients, Graph, TensorId};
pub use params::{full, zeros, Lease, Param, ParamStore};

pub use ndarray;
