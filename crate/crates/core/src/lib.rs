//! Streaming autoregressive block-diffusion engine.
//!
//! The crate is `no_std` with `alloc`: every module here is a pure function of
//! its inputs and an explicitly passed [`Rng`]. File formats, the CLI and wall
//! clock measurement live in the `streamdiff` companion crate.
//!
//! Module map:
//! - [`tensor`]: dense f32 arrays, kernels and the counter-based RNG.
//! - [`rotary`]: factorized (t, h, w) rotary encoding and the epoch-based
//!   temporal index manager.
//! - [`kv_cache`]: sink-protected FIFO cache of pre-rotary keys.
//! - [`denoiser`]: the small block-causal diffusion transformer.
//! - [`diffusion`]: corruption, sampler step, step-bootstrapping queues and
//!   the motion condition frame.
//! - [`pipeline`]: the outer autoregressive loop.
//! - [`dmd`]: a two-dimensional distribution matching distillation toy.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod denoiser;
pub mod diffusion;
pub mod dmd;
mod error;
pub mod kv_cache;
pub mod pipeline;
pub mod rotary;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};

/// Latent frames per autoregressive block.
pub const FRAMES_PER_BLOCK: usize = 3;
/// Blocks jointly denoised in the window.
pub const WINDOW_BLOCKS: usize = 4;
