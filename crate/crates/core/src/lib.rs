//! Post-training quantization for a small pillar-based BEV detector.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. Everything here is pure computation; file formats, the dataset
//! layout on disk and the command line live in the `pillarq` crate.
//!
//! Layout:
//! - [`quant`]: symmetric fake quantization with adaptive rounding offsets.
//! - [`calib`]: max-min, entropy (KL) and grid-search calibrators.
//! - [`nn`]: dense tensors, conv layers, batch-norm folding, a tape autodiff and Adam.
//! - [`detector`]: pillarization, the center-heatmap detector, box decoding and BEV NMS.
//! - [`tgpl`]: pseudo-labels, focal/L1 losses, the task-guided loss and the local reconstruction loss.
//! - [`scene`] and [`eval`]: synthetic scenes and BEV AP evaluation.
//! - [`pipeline`]: FP training, baseline calibration arms and the full quantization pipeline.
#![cfg_attr(not(any(feature = "std", test)), no_std)]
// `!(x > 0.0)` style checks reject NaN on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod calib;
pub mod detector;
mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod quant;
pub mod scene;
pub mod tensor;
pub mod tgpl;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
