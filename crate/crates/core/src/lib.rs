//! Scribble-supervised segmentation with a convolutional U-Net and a
//! state-space (selective scan) U-Net trained jointly under evidence-guided
//! consistency and evidential losses.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cnn;
pub mod data;
pub mod egc;
pub mod error;
pub mod evidence;
pub mod harness;
pub mod losses;
pub mod mamba;
pub mod metrics;
pub mod nn;
pub mod tensor;

pub use cnn::Logits;
pub use error::{Error, Result};
pub use tensor::Tensor;
