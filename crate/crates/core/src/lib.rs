//! Distribution-guided sampling from small diffusion models.
//!
//! The crate trains an epsilon-prediction MLP on a synthetic Gaussian
//! mixture whose components carry binary attribute labels, fits one linear
//! attribute classifier per diffusion step on the network's bottleneck
//! ("h-space") activations, and steers batched DDIM sampling so that the
//! attribute histogram of each generated batch follows a reference
//! distribution.
//!
//! The denoiser's output passes through a fixed linear skip from `x_t`
//! (EDM-style preconditioning), so position is carried by the skip and the
//! bottleneck carries the attribute semantics that guidance edits.
//!
//! Module map:
//! - [`numkit`]: matrices, RNG, MLP forward/backward, Adam.
//! - [`synthdata`]: attributed mixtures and reference distributions.
//! - [`diffcore`]: noise schedule, denoiser training, DDIM sampling/inversion.
//! - [`hspace`]: h-space datasets, per-step classifier banks, the attribute
//!   distribution predictor and its loss gradients.
//! - [`guidance`]: distribution, sample, data-space and latent-edit hooks.
//! - [`metrics`]: fairness discrepancy and sample-quality scores.
//! - [`harness`]: experiment specs, stage cache, tables and sweeps.

pub mod diffcore;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod hspace;
pub mod metrics;
pub mod numkit;
pub mod synthdata;

pub use error::{Error, Result};
