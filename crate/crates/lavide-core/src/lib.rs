//! Map-image change detection with a language-vision discriminator.
//!
//! The pipeline encodes a categorical map through text prompts and a light
//! object encoder, encodes the image with a hierarchical four-scale
//! encoder aligned to a frozen language-vision teacher by cosine
//! distillation, compares both embeddings with a mixture-of-experts
//! discriminative module and classifies per-pixel change. Baseline
//! formulations (category discrimination, color-encoded maps), a synthetic
//! scene generator, confusion-matrix evaluation and an ablation harness
//! round out the crate.

pub mod autodiff;
pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod eval;
pub mod losses;
pub mod lvm;
pub mod map_branch;
pub mod model;
pub mod moe;
pub mod nn;
pub mod rng;
pub mod training;
pub mod types;
pub mod vision_branch;

pub use error::{Error, Result};
