//! Information in the weights of small neural networks.
//!
//! Fisher information, PAC-Bayes bounds built on Gaussian pre- and
//! post-distributions, Langevin escape dynamics, the toy redundant-parameter
//! regression study, and effective information in the activations. All
//! numerics are 64-bit and every stochastic routine takes an explicit [`Seed`].

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activations;
pub mod dynamics;
pub mod error;
pub mod fisher;
pub mod infoweights;
pub mod models;
pub mod ndcore;
pub mod rng;

pub use error::{Error, Result};
pub use rng::Seed;

/// Crate version, recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
