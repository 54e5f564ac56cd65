//! Layout generation with iterative parallel refinement.
//!
//! This crate models graphic layouts as short token sequences (category plus
//! quantized geometry per element), trains a non-autoregressive transformer
//! to fill masked slots in any order, and sharpens its samples over a fixed
//! number of refinement iterations. Each iteration renders the current
//! estimate as a color wireframe; a detection model trained on
//! Hungarian-matched real/generated pairs can then point at the attributes
//! most likely wrong, replacing the usual lowest-confidence remask rule.
//!
//! Modules:
//! - [`layout`]: element/layout model, vocabulary, sequence codec
//! - [`render`]: deterministic wireframe rasterization
//! - [`matching`]: assignment costs, Hungarian solver, mask annotation
//! - [`metrics`]: overlap, alignment, max-IoU, Fréchet feature distance
//! - [`corpus`]: JSONL manifests, synthetic data, ingestion, perturbation
//! - [`nn`]: minimal tensor autodiff layers and optimizer
//! - [`decoder`]: masked-slot transformer over sequences + wireframes
//! - [`locator`]: detection model that flags erroneous attributes
//! - [`refine`]: iterative mask-predict generation loop
//! - [`exec`]: sequential/parallel execution strategy

pub mod config;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod exec;
pub mod layout;
pub mod locator;
pub mod matching;
pub mod metrics;
pub mod nn;
pub mod probe;
pub mod refine;
pub mod render;
pub mod util;

pub use error::{Error, Result};
