//! Detects GAN-generated faces from iris-pair inconsistencies.
//!
//! The pipeline: extract the two iris crops from a face image, compose them
//! into a fixed-size input, classify with a residual attention network, and
//! train that network under a joint objective combining binary cross-entropy
//! with a differentiable pairwise relaxation of the ROC-AUC. The rank-based
//! term is what makes training behave on heavily imbalanced data.
//!
//! Modules map onto the pipeline stages:
//! - [`metrics`]: ROC/AUC/PR/confusion evaluation, pure functions.
//! - [`loss`]: BCE, the pairwise AUC surrogate, and their combination.
//! - [`nn`]: minimal CPU tensor substrate (conv/batchnorm/pool/dense).
//! - [`model`]: the residual attention classifier itself.
//! - [`data`]: manifests, splits, pair composition, the synthetic corpus.
//! - [`extract`]: eye localization and iris segmentation front-end.
//! - [`train`]: the seeded training loop, evaluation, and the alpha sweep.
//! - [`report`]: plots, panels, and text artifacts for the CLI.

pub mod data;
pub mod error;
pub mod extract;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod report;
pub mod train;

pub use error::{Error, Result};
