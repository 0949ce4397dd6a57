//! Margin calibration for IoU-oriented semantic segmentation.
//!
//! The crate derives per-class margin-offsets from label statistics,
//! calibrates per-pixel scores with them, and trains against the resulting
//! log-loss. Around that core it provides the IoU metrics and their
//! empirical lower bound, the generalization-gap evaluator, synthetic
//! imbalanced data, and a tiny per-pixel network to train end to end.

pub mod bound;
pub mod error;
pub mod fmt;
pub mod gradcheck;
pub mod losses;
pub mod margins;
pub mod metrics;
pub mod segdata;
pub mod trainer;

pub use error::{Error, Result};
