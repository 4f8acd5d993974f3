//! Reverse-mode automatic differentiation for dense `f64` image tensors.
//!
//! The engine is a classic Wengert tape: every operation appends a node that
//! records its parents and a backward closure.  Calling [`Tape::backward`] on
//! a scalar output walks the tape in reverse and accumulates gradients for
//! every node that (transitively) depends on a trainable leaf.
//!
//! Design points:
//!
//! * **`f64` everywhere.**  The networks trained here are small enough that
//!   double precision costs little, and it makes finite-difference gradient
//!   verification meaningful to ~1e-6 relative error.
//! * **NCHW layout.**  All image tensors are `[batch, channels, height,
//!   width]`, stored as dynamic-dimension `ndarray` arrays.
//! * **Per-sample GEMM.**  Convolutions lower to im2col + matrix multiply,
//!   one GEMM per batch item.  This keeps results bit-identical whether
//!   samples are processed batched or one by one, which several fusion
//!   invariants rely on.
//! * **Gradient pruning.**  A node only receives a gradient if a trainable
//!   leaf lies below it, so constant inputs (images, targets) never cause
//!   backward work.

pub mod check;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod tape;

pub use tape::{Arr, Tape, Var};

/// Convenience alias used throughout: dynamic-dimension f64 array.
pub type Shape = Vec<usize>;
