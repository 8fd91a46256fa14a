//! A self-contained diffusion-transformer engine for text-video prediction.
//!
//! The crate trains a small DiT backbone on a synthetic moving-shapes task,
//! then freezes it and fine-tunes frame-wise conditioning adaptation (FCA)
//! modules: parallel cross-attention blocks whose keys/values concatenate
//! text tokens, initial-frame latents and frame-wise text embeddings, plus
//! per-layer frame-wise text conditioning (FTC) modules with an identity
//! frame mask. Everything runs on the built-in tape-based tensor engine;
//! no external ML runtime is required.

pub mod container;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod model;
pub mod rng;
pub mod runcfg;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
