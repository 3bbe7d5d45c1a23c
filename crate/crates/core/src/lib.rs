//! Conflict-based cross-view consistency (CCVC) for semi-supervised
//! semantic segmentation: a two-branch co-training network whose branches
//! are pushed apart in feature space and tied together through
//! conflict-weighted cross pseudo-labels.

pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod label;
pub mod losses;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{CcvcError, Result};
pub use tensor::{Real, Tensor};
