//! File formats, datasets on disk, configuration and the command line for
//! the pillarq quantization toolkit. The numerics live in `pillarq-core`.
//!
//! - [`model`]: PTQF v1 model files.
//! - [`dataset`]: PCL1 point clouds, label text, the manifest and an audited reader.
//! - [`config`]: flat `key = value` settings.
//! - [`report`]: JSON and CSV artifacts.
//! - [`cli`]: the `pillarq` subcommands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod dataset;
mod error;
pub mod model;
pub mod report;

pub use error::{Error, Result};
