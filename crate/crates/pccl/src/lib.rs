//! Training, evaluation and tooling for PCCL semi-supervised segmentation.
//!
//! The numerical core (losses, metrics, configuration, data transforms)
//! lives in [`pccl_core`]; this crate runs the two segmenters on candle,
//! reads and writes datasets, checkpoints and reports, and drives training.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod history;
pub mod kernels;
pub mod models;
pub mod nn;
pub mod optim;
pub mod report;
pub mod settings;
pub mod trainer;

pub use pccl_core as core;

pub use crate::error::{Error, Result};
pub use crate::models::Segmenter;
