//! Gaussian-process models of Hamiltonian dynamics.
//!
//! A GP prior on the energy `H` induces a symplectic vector field
//! `f = P ∇H`. Posterior fields are drawn with decoupled pathwise sampling,
//! integrated with RK4 or Dormand–Prince, and fitted by stochastic
//! variational inference with optional multiple shooting.

pub mod error;
pub mod field;
pub mod grad;
pub mod kernel;
pub mod linalg;
pub mod odeint;
pub mod systems;
pub mod vi;

pub use error::{Error, Result};
