//! Perspective-guided fractional-dilation convolution (PFC) for crowd
//! counting: the operator with its full backward pass, the perspective to
//! dilation-rate pipeline, a perspective-estimation auto-encoder, a toy
//! counting network, density targets, counting metrics, training drivers
//! and benchmarks.

// NaN-rejecting range checks read as `!(v >= 0.0)`; kernels take many dims.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop, clippy::type_complexity)]

pub mod data;
pub mod error;
pub mod fdconv;
pub mod harness;
pub mod layers;
pub mod params;
pub mod penet;
pub mod perspective;
pub mod pfdnet;
pub mod pgc;
pub mod tensor;

pub use error::{Error, Result};
