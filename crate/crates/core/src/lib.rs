//! Character-consistent image generation on a toy diffusion transformer.
//!
//! A frozen base model is extended with a trainable adapter that turns
//! reference-image features into context tokens for added cross-attention
//! layers. Everything runs on a small in-crate autodiff engine so the full
//! training curriculum fits on a CPU.

pub mod adapter;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dit;
pub mod encoders;
pub mod eval;
pub mod error;
pub mod image;
pub mod nn;
pub mod optimizer;
pub mod params;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
