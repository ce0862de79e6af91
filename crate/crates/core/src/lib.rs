//! Deeply-supervised network training with gated companion objectives.
//!
//! The crate trains small convolutional classifiers whose hidden layers carry
//! their own "companion" classifier heads. The total objective is
//!
//! ```text
//! F(W) = P(W) + Q(W)
//! P(W) = ||w_out||^2 + L(W)                          output margin + data loss
//! Q(W) = sum_m alpha_m * [ ||w_m||^2 + l_m - gamma ]+  gated companion terms
//! ```
//!
//! where `l_m` is the companion data loss at hidden layer `m` and the hinge
//! bracket switches a companion off once it is good enough (`<= gamma`).
//! Everything is plain `f64` with exact analytic gradients; there is no
//! autodiff and no implicit parallelism, so a fixed seed reproduces a run
//! bit for bit.
//!
//! Alongside the trainer, [`convergence`] implements a small laboratory for
//! the stochastic-gradient rate analysis that motivates the composite
//! objective: synthetic strongly-convex quadratic pairs, projected SGD with
//! the two canonical step schedules, and the closed-form rate bounds they
//! are compared against.
//!
//! The crate is `no_std`-compatible (`alloc` required): disable the default
//! `std` feature and enable `libm` to supply the transcendental functions.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("dsn-core needs a float math provider: enable `std` or `libm`");

pub mod convergence;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
mod math;
pub mod network;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
