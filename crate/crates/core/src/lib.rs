//! Linear diffusion networks: sequence layers in which tokens exchange
//! information through learned, row-sum-zero diffusion kernels instead of
//! self-attention.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` matrices, a seeded generator and a reverse-mode tape
//! - [`kernels`]: content-gated diffusion kernels with stability normalization
//! - [`layer`]: diffusion, local update, diffusion attention and their residual sum
//! - [`model`]: embedding, positional code, layer stack and classification head
//! - [`training`]: synthetic tasks, Adam, the training loop and checkpoints
//! - [`analysis`]: executable stability and global-dependency checks, gradient checking

pub mod analysis;
pub mod error;
pub mod kernels;
pub mod layer;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Matrix, SeededRng};
