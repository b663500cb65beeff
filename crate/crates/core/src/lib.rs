//! Tunable attention pooling (TAP) classifier head for detecting AI-generated
//! images from frozen vision-encoder token features.
//!
//! The crate is organised bottom-up:
//!
//! - [`feature_store`]: the TFRB token-feature file format and batching.
//! - [`linalg`]: dense kernels (layer norm, softmax, GELU, affine) with exact
//!   backward passes.
//! - [`model`]: the TAP head and the `cls`-only linear probe baseline.
//! - [`checkpoint`]: the TAPC checkpoint container.
//! - [`optimizer`]: AdamW with decoupled weight decay and the LR schedule.
//! - [`metrics`] and [`trainer`]: loss, training loop and per-tag reports.
//! - [`synth`]: planted-artifact synthetic datasets with a closed-form oracle.
//! - [`gradcheck`]: finite-difference audit of the full model.

pub mod checkpoint;
pub mod error;
pub mod feature_store;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use feature_store::{FeatureDataset, Label, TokenFeatureRecord};
pub use linalg::Matrix;
pub use model::{Classifier, LinearProbe, Model, TapConfig, TapParams};
