//! Segmentation losses with verified gradients, segmentation metrics,
//! slide-level feature extraction and random-forest risk grading for colon
//! biopsy tissue maps, plus the synthetic data and training harness used to
//! exercise them at desk scale.

pub mod error;
pub mod exec;
pub mod features;
pub mod forest;
pub mod loss;
pub mod metrics;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
