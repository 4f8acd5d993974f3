//! Core library for multi-image super-resolution of satellite revisit
//! series: scene data model, synthetic degradation generator, dataset
//! splitting, registration, fusion and single-image baselines, fidelity
//! metrics, and the downstream building-extraction evaluation.
//!
//! All pixel tensors are `f64` in `[C, H, W]` band-major layout; stacks of
//! revisits add a leading `T` axis.  Learned components run on the
//! reverse-mode tape from `srfuse_autograd`.

pub mod building;
pub mod consistency;
pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod ingest;
pub mod io;
pub mod metrics;
pub mod misr;
pub mod registration;
pub mod sisr;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
