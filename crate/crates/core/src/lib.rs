//! Coarse-to-fine pseudo-labeling for unsupervised video anomaly detection
//! over pre-extracted segment features.
//!
//! Stages, in pipeline order:
//!
//! - [`features`]: feature bundles, their binary format, per-video summaries.
//! - [`cpl`]: video-level pseudo-labels by divisive 2-component GMM clustering.
//! - [`fpl`]: segment-level pseudo-labels from a Gaussian null model and a
//!   minimum-density sliding window.
//! - [`detector`]: attention MLP trained on the pseudo-labels.
//! - [`eval`]: frame-level scores and ROC-AUC.
//! - [`pipeline`]: end-to-end runs, ablations and sweeps.
//! - [`synth`]: synthetic bundles with planted ground truth.

pub mod cpl;
pub mod detector;
pub mod error;
pub mod eval;
pub mod features;
pub mod fpl;
pub mod pipeline;
pub mod seed;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
