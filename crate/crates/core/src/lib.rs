//! Numerical laboratory for neural-tangent-kernel spectra of coordinate
//! networks.
//!
//! The crate assembles NTK Gram matrices for two-layer ReLU coordinate
//! networks (plain and normalized/Hadamard-modulated), decomposes their
//! eigenvalue statistics into pairwise similarity factors, evaluates the
//! closed-form moments of random Fourier feature encodings, and compares
//! finite-width gradient descent against its frozen-kernel linearization.
//!
//! Module map:
//!
//! * [`linalg`]: symmetric matrices, Jacobi eigensolver, seeded RNG.
//! * [`signals`]: coordinate grids, target signals, PGM I/O, PSNR.
//! * [`encoding`]: random Fourier features and their similarity moments.
//! * [`models`]: two-layer and multi-layer networks with analytic gradients.
//! * [`ntk`]: Gram assembly, similarity bundles, spectral statistics.
//! * [`dynamics`]: frozen-kernel solutions and finite-width training.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod encoding;
pub mod error;
pub mod linalg;
pub mod models;
pub mod ntk;
pub mod signals;

pub use error::{NtkError, Result};
