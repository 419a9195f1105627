//! Desk-scale training and analysis harness for velocity-prediction
//! diffusion transformers with multi-level representation alignment.
//!
//! The crate bundles:
//! - a from-scratch reverse-mode autodiff tensor core ([`tensor`]),
//! - the linear stochastic interpolant and denoising objective
//!   ([`interpolant`]),
//! - the four networks: denoising transformer, frozen target encoder,
//!   projection head and discriminator ([`networks`]),
//! - patch-wise, structural and adversarial alignment losses
//!   ([`alignment`]),
//! - a joint trainer with the asymmetric discriminator schedule,
//!   checkpointing and JSONL metrics ([`trainer`]),
//! - a reverse-time Euler–Maruyama sampler with classifier-free guidance
//!   ([`sampler`]),
//! - representation diagnostics: correlation maps, SVD energy, Gaussian
//!   Fréchet distance ([`diagnostics`]),
//! - a finite-difference gradient checker ([`gradcheck`]).

pub mod alignment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod interpolant;
pub mod networks;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Dtype, Element, Tensor};
