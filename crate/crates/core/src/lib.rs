//! Spectral Galerkin laboratory for dissipative semilinear stochastic PDEs
//! `dX = (AX + F(X)) dt + √C dW` on `[0, 1]` with Dirichlet boundary
//! conditions.

pub mod dirichlet;
pub mod drift;
pub mod engine;
pub mod error;
pub mod invariant;
pub mod io;
pub mod observables;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
