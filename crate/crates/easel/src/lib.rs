//! Adversarial stroke-painting agents.
//!
//! An agent paints by sending brush-stroke commands to a deterministic
//! rasterizer and is rewarded by a jointly trained discriminator. The crate
//! provides:
//!
//! - [`render`]: parametric stroke curves rasterized as antialiased brush dabs
//!   onto an RGB canvas.
//! - [`env`]: the episode state machine with a simple (one Bézier per step)
//!   and a compound (multi-step spline building) action interface, plus stroke
//!   penalties and replayable trajectory logs.
//! - [`nn`]: a small reverse-mode autodiff stack (dense / conv / GRU /
//!   softmax), Adam, and spectral normalization.
//! - [`disc`]: the reward-providing discriminator with standard-GAN +
//!   spectral-norm and WGAN-GP losses, and complement-masked conditioning.
//! - [`agent`]: the recurrent policy with autoregressive action heads, reward
//!   assembly (per-step score differences or final-step-only), and the
//!   advantage actor-critic learner.
//! - [`pbt`]: population-based training of several generators sharing one
//!   discriminator.
//! - [`data`]: procedural toy datasets and PNG directory ingestion.
//! - [`train`] + [`config`]: the full training loop, run directories,
//!   checkpoints, metrics, and ablation presets.
//!
//! Start with the runnable examples (`cargo run --example ...`); each one
//! demonstrates a single capability end to end.

pub mod agent;
pub mod config;
pub mod data;
pub mod disc;
pub mod env;
pub mod eval;
pub mod geom;
pub mod nn;
pub mod oracle;
pub mod pbt;
pub mod png_io;
pub mod render;
pub mod replay;
pub mod train;
pub mod util;
