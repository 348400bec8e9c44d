//! Growth estimation for pulmonary nodules from a single baseline patch.
//!
//! A hierarchical probabilistic segmentation network (`net`) predicts the
//! follow-up appearance of a nodule; Monte-Carlo sampling (`infer`) turns
//! those predictions into growth probability and size with uncertainty, and
//! `metrics` scores them against several radiologists at once. `phantom`
//! provides synthetic cohorts with known growth.

pub mod baselines;
pub mod data;
mod error;
pub mod infer;
pub mod metrics;
pub mod net;
pub mod phantom;
pub mod train;

pub use error::{Error, Result};
