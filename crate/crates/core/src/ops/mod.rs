//! Forward and backward kernels for every differentiable operation.
//!
//! These are plain functions over tensors and slices; shape validation
//! happens once in [`crate::tape::Tape`], so kernels only `debug_assert`
//! their preconditions. Backward kernels accumulate (`+=`) into caller-owned
//! buffers so one tensor can feed several consumers.

pub mod conv;
pub mod norm;
pub mod pointwise;
pub mod pool;
pub mod reduce;
