//! Set-prediction detector for bleeding regions in capsule-endoscopy frames.
//!
//! A small convolutional backbone feeds a transformer encoder-decoder over
//! learned object queries; each query predicts a bleed / non-bleed /
//! background category and a box. Training matches predictions to ground
//! truth with the Hungarian algorithm and minimizes a weighted
//! cross-entropy + L1 + GIoU loss. Everything runs on the in-crate
//! reverse-mode autodiff engine in [`autodiff`].

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod category;
pub mod cli;
pub mod data;
pub mod error;
pub mod geometry;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::Tensor;
