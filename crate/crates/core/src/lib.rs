//! Particles jumping forward on the real line, with jump rates tied to the
//! center of mass.
//!
//! The crate covers four views of the same dynamics and the machinery to
//! cross-validate them:
//!
//! - [`simulator`]: exact event-driven simulation of the finite-n Markov
//!   jump process;
//! - [`exact_small`]: exact and numerically-exact stationary laws for two
//!   and three particles (gap chain, gap master equation, lattice solve);
//! - [`meanfield`]: a grid solver for the limiting integro-differential
//!   equation, self-consistently coupled to its own mean;
//! - [`waves`]: closed-form traveling-wave densities and wave speeds.
//!
//! [`metrics`] compares any two of these (Wasserstein, Kolmogorov, test
//! dictionary), [`evt`] reproduces the record-process construction that
//! identifies the Gumbel wave, [`model`] holds the shared primitives, and
//! [`specfun`] the scalar numerics everything sits on.

pub mod error;
pub mod evt;
pub mod exact_small;
pub mod meanfield;
pub mod metrics;
pub mod model;
pub mod seeds;
pub mod simulator;
pub mod specfun;
pub mod waves;

pub use error::{Error, Result};
pub use model::{
    expected_post_jump, DensitySpec, InitialCondition, JumpLaw, RateFunction, TestFunction,
};
