//! covft-lab: a desk-scale laboratory for context-aware visual fine-tuning.
//!
//! The crate bundles a small reverse-mode autodiff engine, a toy multimodal
//! model (ViT-style encoder, projector, causal decoder), a synthetic
//! grid-scene task generator, and the training / analysis machinery needed to
//! compare visual fine-tuning strategies — including a contextual
//! mixture-of-experts path where a text-derived context vector routes visual
//! FFN experts and modulates their gradients.
//!
//! Everything runs single-process on a CPU in f64. All randomness flows from
//! one root seed through named sub-streams, so any run is reproducible
//! bit-for-bit on a given platform.
//!
//! Start with the `examples/` directory: each example exercises one major
//! capability end to end. The `covft-lab` binary exposes the same entry
//! points as subcommands (`train`, `bench`, `conflict`, `analyze`, `verify`).

pub mod analysis;
pub mod autodiff;
pub mod comoe;
pub mod cve;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod seed;
pub mod taskgen;
pub mod tensor;
pub mod verify;
pub mod vft;

pub use error::{Error, Result};
pub use tensor::Tensor;
