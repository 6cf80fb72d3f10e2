//! Analysis toolkit for Markov-modulated fluid networks (MMFNs).
//!
//! An MMFN is a set of `d` fluid buffers ("stations") with deterministic
//! proportional routing between them, whose exogenous input rates and
//! potential release rates are switched by a finite background Markov chain.
//! The buffer content process is the multidimensional Skorokhod reflection of
//! a piecewise-linear free process.
//!
//! The crate provides:
//!
//! * [`model`] — model definition, validation, and derived static data
//!   (reflection matrix `R = I - Pᵗ`, net flow rates `v`),
//! * [`traffic`] — linear/nonlinear traffic equations and stability,
//! * [`spectral`] — the matrix `K(θ) = diag(Σ θ_k v_k) + Q`, its dominant
//!   eigenvalue `γ(θ)` with eigenvectors, gradients, and the exponentially
//!   twisted background generator,
//! * [`geometry`] — the sublevel-set geometry of `γ`, a lattice fixed-point
//!   iteration for the moment-domain sets `D_k`/`D^(max)`, and analytic
//!   decay-rate bounds for stationary tail probabilities,
//! * [`simulator`] — an exact event-driven simulator of the reflected (and
//!   partially reflected) process plus Monte-Carlo estimators,
//! * [`pipeline`] — report types and the end-to-end verification run used by
//!   the CLI.

pub mod error;
pub mod geometry;
pub mod model;
pub mod pipeline;
pub mod simulator;
pub mod spectral;
pub mod traffic;

mod eigen;

#[cfg(test)]
mod test_models;

pub use error::{Error, Result};
pub use model::{DerivedModel, MmfnModel, ValidationReport};
