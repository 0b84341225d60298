//! Bayesian estimation of precision matrices written as sums of Kronecker
//! products of Cholesky factors.
//!
//! The crate is organized bottom-up: [`geometry`] (Cholesky factors and the
//! log-Cholesky manifold), [`kronecker`] (Kronecker algebra and the
//! Pitsianis–Van Loan decomposition), [`hyperprior`] (data-driven prior
//! centering), [`model`] and [`dynamic`] (the static and seasonal posteriors),
//! and [`hmc`] / [`diagnostics`] (sampling).

pub mod diagnostics;
pub mod dynamic;
pub mod error;
pub mod geometry;
pub mod hmc;
pub mod hyperprior;
pub mod kronecker;
pub mod model;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
