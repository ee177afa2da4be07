//! Desk-scale laboratory for protective perturbations against diffusion-based
//! inpainting.
//!
//! The crate bundles a tape-based autodiff tensor core, a toy mask-conditioned
//! pixel-space diffusion model, a mask-guided sampling pipeline, the
//! structure-disruption attack with its baselines, and the metric harness the
//! bench CLI drives.

pub mod attack;
pub mod ckpt;
pub mod diffusion;
pub mod error;
pub mod inpaint;
pub mod metrics;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
