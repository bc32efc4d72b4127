//! No-reference image quality assessment.
//!
//! A small residual CNN extracts four feature scales which are normalized,
//! L2-pooled to a common grid and fused by a self-attention encoder. Two
//! pooled branches (convolutional and attention) each produce a logit and the
//! quality score is their sum. Training combines an L1 quality regression, a
//! relative-ranking triplet loss whose margins come from the batch's extreme
//! subjective scores, and a self-consistency loss between an image batch and
//! its horizontally flipped copy.
//!
//! The crate also carries the evaluation protocol (SROCC, PLCC after a
//! 4-parameter logistic mapping, dataset-size weighted averages), a
//! deterministic synthetic distortion dataset generator, and diagnostics
//! (flip sensitivity, latent nearest neighbors, spatial quality maps,
//! scatter plots, ablations).
//!
//! Everything runs on the CPU through the tape in [`nn`]; `f32` is used for
//! training and `f64` for gradient verification.

pub mod analysis;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod head;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ModelOutput, ScoreScale};
pub use tensor::{Scalar, Tensor};
