//! Analysis and optimal cooling control for networks of stochastic
//! oscillators.
//!
//! The library models inertial particles in a potential well, coupled by
//! friction and driven by thermal noise.  Around that model it provides:
//!
//! * [`model`] — oscillator networks, their phase-space realization, the
//!   Boltzmann state, and the fluctuation–dissipation check;
//! * [`analysis`] — stationary analysis of the linearized dynamics
//!   (Lyapunov solves, controllability, reversibility, relative entropy,
//!   covariance flow) and the steady-state cooling feedback design;
//! * [`bridge`] — finite-horizon optimal cooling: a two-point boundary-value
//!   problem for a pair of matrix Riccati equations, solved by shooting,
//!   yielding a time-varying feedback schedule;
//! * [`sim`] — Euler–Maruyama ensembles with reproducible per-trajectory
//!   noise streams, plus the statistical estimators used to validate the
//!   deterministic predictions (covariance, control cost, energy ledger,
//!   time-reversibility).

// Validation throughout uses `!(x > 0.0)`-style comparisons on purpose: a NaN
// input must fail the check, which `x <= 0.0` would silently accept.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod bridge;
pub mod error;
pub mod model;
pub mod sim;
pub(crate) mod util;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};

// Compile and run every code snippet in the guide (`book/`) as a
// documentation test, so the guide cannot drift out of sync with the
// library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/oscillators.md")]
    mod oscillators {}
    #[doc = include_str!("../../../book/src/stationary.md")]
    mod stationary {}
    #[doc = include_str!("../../../book/src/steady-cooling.md")]
    mod steady_cooling {}
    #[doc = include_str!("../../../book/src/bridge.md")]
    mod bridge {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
