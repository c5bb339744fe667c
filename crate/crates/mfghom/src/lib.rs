//! Numerical homogenization of periodic viscous mean-field-games systems.
//!
//! The building blocks, bottom up:
//!
//! - [`torus`]: periodic grids, fields and finite-difference operators
//! - [`models`]: Hamiltonians, couplings and assumption checks
//! - [`cell`]: ergodic cell problems (corrector, invariant density, ergodic constant)
//! - [`effective`]: tables of effective Hamiltonians and drifts, structure defects
//! - [`eps_solver`]: the oscillatory forward-backward system at scale `eps`
//! - [`limit_solver`]: the homogenized first-order system driven by a table
//! - [`experiments`]: convergence and structure experiments built from the above
//! - [`cli`]: configuration, dispatch and report output for the `mfghom` binary

pub mod cell;
pub mod cli;
pub mod container;
pub mod effective;
pub mod eps_solver;
pub mod error;
pub mod experiments;
pub mod limit_solver;
pub mod linalg;
pub mod models;
pub mod torus;

pub use error::{Error, Result};
