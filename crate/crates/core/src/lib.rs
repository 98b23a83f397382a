//! Early-exit branches for frozen convolutional backbones.
//!
//! The crate covers the whole path from a backbone graph to a tuned
//! early-exit model:
//!
//! - [`tensor`], [`autodiff`], [`layer`], [`optim`]: small f32 numerics with
//!   a reverse-mode tape and momentum SGD.
//! - [`graph`], [`pretrain`], [`checkpoint`]: backbone families, desk-scale
//!   pre-training and the binary checkpoint format.
//! - [`flops`]: MAC-pair cost model, exit cost tables and branch placement.
//! - [`branch`], [`model`]: ConvX branches and their attachment.
//! - [`train`]: pseudo-labels and the cumulative prediction/cost loss.
//! - [`infer`]: threshold-gated inference with per-sample cost accounting.
//! - [`data`], [`config`], [`harness`]: datasets, experiment configuration
//!   and the lambda / threshold sweeps.

pub mod autodiff;
pub mod branch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod flops;
pub mod graph;
pub mod harness;
pub mod infer;
pub mod layer;
pub mod model;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
