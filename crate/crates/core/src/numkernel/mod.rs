// SPDX-License-Identifier: Apache-2.0

//! Numerical kernel: tensors, special functions, conv/pool kernels and the
//! differentiation tape.

pub mod gradcheck;
pub mod ops;
pub mod special;
pub mod tape;
mod tensor;

pub use gradcheck::{compare_with_fd, grad_check};
pub use ops::{conv1d, pool1d, PoolKind};
pub use special::{digamma, lgamma, trigamma};
pub use tape::{BatchStats, BnMode, Gradients, Tape, Var};
pub use tensor::Tensor;

/// The seeded generator used for every stochastic step in the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;
