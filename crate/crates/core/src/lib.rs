//! Toy-scale expert-ensemble diffusion.
//!
//! EDM-preconditioned denoisers are trained on equal-mass intervals of a
//! log-normal noise law, grown as a binary tree of experts, routed by noise
//! level during ODE sampling, and steered with classifier-free guidance and
//! paint-with-words cross-attention bias. Analytic Gaussian-mixture
//! denoisers serve as ground truth throughout.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod conditioning;
pub mod denoiser;
pub mod engine;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod nets;
pub mod noise;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
