//! Object-hallucination benchmarks and hallucination-aware contrastive
//! fine-tuning for dual image-text encoders.
//!
//! The crate is organised as a pipeline:
//!
//! * [`corpus`] holds annotated images, benchmark sets and their line-delimited
//!   file formats.
//! * [`countergen`] turns an annotated caption into 27 typed negative captions
//!   (object insertion with random/popular/adversarial objects, object removal,
//!   and attribute alteration).
//! * [`encoder`] defines the dual-encoder contract and a hashed bag-of-tokens
//!   toy encoder that is small enough to train and gradient-check on a laptop.
//! * [`objective`] implements the contrastive loss with enhanced negatives, the
//!   two margin terms, and the SGD fine-tuning loop.
//! * [`evalhall`] computes caption-selection accuracy, zero-shot accuracy,
//!   CHAIR/Cover and POPE-style metrics.
//! * [`report`] renders result tables, CSV and plot series.

pub mod corpus;
pub mod countergen;
pub mod encoder;
mod error;
pub mod evalhall;
pub mod hashing;
pub mod objective;
pub mod report;
pub mod synth;

pub use error::{Error, Result};

/// Version string written into every generated artifact.
pub const GENERATOR_VERSION: &str = concat!("ohd-core/", env!("CARGO_PKG_VERSION"));
