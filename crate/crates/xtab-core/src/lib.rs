//! Robust global feature ranking for tabular data.
//!
//! The method trains a small mask-generator network together with an encoder
//! and a classifier several times under different seeds, averages the mask
//! parameters into a single global mask, and uses that mask's per-feature
//! output, averaged over a test set, as the feature ranking. A final training
//! pass combines the frozen global mask with a freshly trained local one to
//! recover classification accuracy.
//!
//! Crate layout:
//! - [`nn`]: dense layers, initialization, analytic gradients
//! - [`optim`]: AdamW
//! - [`datagen`]: synthetic benchmark generators and CSV ingestion
//! - [`pipeline`]: the masked, feature-bagged training step and its losses
//! - [`orchestrator`]: seeded multi-run training, parameter averaging, the
//!   frozen-global final pass, and run-directory persistence
//! - [`analysis`]: importance extraction, bootstrap rank stability,
//!   interpolation sweeps

pub mod analysis;
pub mod datagen;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod orchestrator;
pub mod parallel;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
