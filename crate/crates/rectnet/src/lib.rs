//! Pulmonary nodule detection in chest CT volumes.
//!
//! The pipeline: segment the lungs, sample multi-slice patch stacks on a
//! regular grid, classify each stack with a hybrid CNN+LSTM network (or a
//! multi-channel CNN baseline), assemble the per-location probabilities
//! into a sparse probability map, and condense high-probability regions
//! into candidate nodules scored against ground truth with FROC analysis.

pub mod cli;
pub mod detector;
pub mod error;
pub mod evaluator;
pub mod lung_seg;
pub mod models;
pub mod neural;
pub mod sampler;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
