//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! All image-like data is laid out N, C, H, W. Graphs are generic over the
//! scalar type so the same model code runs in `f32` for training and in
//! `f64` for finite-difference checks.

mod error;
mod gradcheck;
mod graph;
mod ops;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_strided, relative_error, GradCheckReport, DEFAULT_FLOOR};
pub use graph::{ConvGeom, Graph, UpsampleMode, Var};
pub use ops::channel::{softmax_channels_tensor, STATS_EPS};
pub use ops::conv::conv_out_len;
pub use ops::loss::LOGIT_CLAMP;
pub use ops::pointwise::LEAKY_SLOPE;
pub use ops::resample::{avg_pool2_tensor, upsample_tensor};
pub use real::Real;
pub use tensor::Tensor;

#[cfg(feature = "fault-injection")]
pub use ops::conv::fault;
