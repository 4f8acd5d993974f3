//! Structural tensor operations: convolution, reshaping, resampling, warping
//! and fused losses.  Each file adds methods to [`crate::Tape`].

mod conv;
mod loss;
mod resize;
mod shape;
mod warp;

pub use resize::bicubic_resize_arr;
pub use warp::translate_arr;
