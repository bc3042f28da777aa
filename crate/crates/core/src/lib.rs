//! Allocation-only core of the PCCL semi-supervised segmentation framework.
//!
//! Everything in this crate is pure computation over owned buffers: the
//! per-pixel map types, softmax and pseudo-labelling, every training loss
//! together with its analytic gradient, the surface-distance metrics, the
//! validated training configuration, the architecture profiles used to size
//! the two segmenters, and the image/data transforms behind augmentation and
//! the synthetic phantom generator. IO, model execution and the CLI live in
//! the `pccl` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod arch;
pub mod config;
pub mod data;
pub mod ema;
mod error;
pub mod image;
pub mod losses;
pub mod maps;
pub mod metrics;
pub mod ops;
pub mod phantom;

pub use crate::config::{BaselineMode, LossToggles, LossWeights, TrainConfig};
pub use crate::error::{Error, Result};
pub use crate::losses::LossBundle;
pub use crate::maps::{LogitMap, MaskMap, ProbMap, Shape};
pub use crate::metrics::MetricReport;
