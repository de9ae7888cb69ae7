//! Optimal control of finite-basis time-dependent Hartree-Fock dynamics with
//! a neural-network feedback law trained through discrete adjoints of the
//! modified-midpoint unitary transform propagator.

pub mod adjoint;
pub mod campaign;
pub mod controller;
pub mod error;
pub mod herm;
pub mod matexp;
pub mod molsys;
pub mod optimizer;
pub mod parallel;
pub mod propagator;
pub mod sampling;

#[cfg(test)]
mod testing;

pub use error::{Error, Result};
