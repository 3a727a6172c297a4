//! Conditioning stack for a toy instruction-conditioned video world model:
//! action-tree instruction encoding, multi-modal visual guidance with a
//! patch router, a spatial-temporal adapter, a latent video diffusion model,
//! a synthetic sprite-world dataset and the evaluation harness.

pub mod action_tree;
pub mod adapter;
pub mod diffusion;
mod error;
pub mod eval;
pub mod guidance;
pub mod modalities;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod spriteworld;

pub use error::{Error, Result};
