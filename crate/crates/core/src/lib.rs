//! Semi-supervised segmentation with boundary-prototype contrastive learning.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: segmentation masks, exact signed distance maps and distance-bin histograms.
//! * [`protobank`]: per-(class, distance) prototypes, contrast sets and the teacher prototype set.
//! * [`losses`]: every training objective together with its analytic gradient.
//! * [`model`]: a small U-Net with fused multi-scale features, a 128-d projection head and
//!   the prototype classifier.
//! * [`data`]: synthetic data generation, on-disk datasets, splits and augmentation.
//! * [`metrics`]: Dice, Jaccard, 95th percentile Hausdorff distance and ASSD.
//! * [`trainer`]: the two-stage student/teacher training loop, evaluation, checkpoints and
//!   ablation runs.
//!
//! Data-parallel loops go through [`parallel`], which uses rayon when the `parallel` feature is
//! enabled (default) and falls back to plain iterators otherwise.

pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod protobank;
pub mod trainer;

pub use error::{PccsError, Result};

/// Dimension of the contrastive projection space.
pub const PROJ_DIM: usize = 128;
