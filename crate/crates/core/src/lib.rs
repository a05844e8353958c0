//! Language-centric contrastive refinement of a toy multimodal model.
//!
//! The crate builds a synthetic multimodal world, generatively pretrains a
//! small encoder/trunk/head model on it, refines the shared trunk with
//! text-only contrastive learning (LoRA, full fine-tuning or a linear
//! projection), and measures what happens to every modality:
//!
//! * [`geometry`]: anisotropy and mutual-kNN kernel alignment,
//! * [`evalsuite`]: retrieval, correlation, probing, zero-shot and clustering metrics,
//! * [`theory`]: the generative-prior PAC-Bayes bound and scaling-law fits,
//! * [`pipeline`]: end-to-end experiments used by the CLI and the acceptance suite.

pub mod config;
pub mod contrastive;
pub mod datagen;
pub mod embdump;
pub mod error;
pub mod evalsuite;
pub mod geometry;
pub mod numerics;
pub mod pipeline;
pub mod provenance;
pub mod theory;
pub mod toymodel;

pub use error::{Error, Result};
