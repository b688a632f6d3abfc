// SPDX-License-Identifier: Apache-2.0

//! Uncertainty-aware unsupervised domain adaptation for multichannel time
//! series.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkernel`]: dense `f64` tensors, `lgamma`/`digamma`, 1D conv and
//!   pooling kernels, a reverse-mode tape and a finite-difference checker.
//! - [`evidential`]: Dirichlet evidence, uncertainty, the three Bayesian-risk
//!   losses, the KL regulariser and its annealing schedule.
//! - [`multiscale`]: down-sampled copies of the input, feature mixing and the
//!   auxiliary-head classification loss.
//! - [`alignment`]: statistical domain-alignment losses plus measurement-only
//!   discrepancy statistics.
//! - [`model`], [`trainer`]: the network, its file format and the training loop.
//! - [`metrics`], [`data`]: evaluation and dataset handling.
//! - [`cli`]: the `evuda` command-line surface.

#![forbid(unsafe_code)]

pub mod alignment;
pub mod cli;
pub mod data;
pub mod error;
pub mod evidential;
pub mod metrics;
pub mod model;
pub mod multiscale;
pub mod numkernel;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use numkernel::{SeededRng, Tensor};

/// Toolkit version embedded in every report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
