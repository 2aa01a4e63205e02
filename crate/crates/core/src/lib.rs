//! Adversarial variational auto-encoder (AVAE) on a small reverse-mode engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`tape`]: dense `f64` tensors and define-by-run differentiation
//! - [`model`]: encoder, decoder, generator and critic MLPs
//! - [`loss`]: the VAE, critic, manifold and latent-reconstruction objectives
//! - [`optim`], [`train`], [`checkpoint`], [`config`]: Adam, the four-way
//!   alternating training step, binary checkpoints and key=value configs
//! - [`toy`], [`eval`]: the two-dimensional toy distribution, its exact-structure
//!   oracles and the evaluation metrics
//! - [`gradcheck`]: finite-difference verification of every loss

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod optim;
pub mod report;
pub mod special;
pub mod tape;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Result, TensorError};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
