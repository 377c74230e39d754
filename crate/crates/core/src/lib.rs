//! Closed-form theory of linear diffusion models with Monte Carlo checks.
//!
//! The crate covers ground-truth covariance models and sampling
//! ([`covariance`]), noise schedules ([`schedule`]), optimal and trained
//! affine denoisers ([`denoiser`]), the reverse sampler ([`sampler`]),
//! replica predictions for finite training sets ([`replica`]) and empirical
//! diagnostics ([`metrics`]). The `lindiff` binary drives experiment sweeps
//! through [`cli`].

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod covariance;
pub mod denoiser;
pub mod error;
pub mod io;
pub mod metrics;
pub mod numeric;
pub mod replica;
pub mod sampler;
pub mod schedule;
pub mod seed;

pub use error::{Error, Result};
