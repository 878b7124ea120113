//! Numerical laboratory for the high-probability behaviour of Adam, its
//! RMSProp reduction, and SGD.
//!
//! The crate is `no_std` (with `alloc`). Everything here is a pure function of
//! its inputs and a [`kernel::RngStream`] path, so results are reproducible
//! regardless of how runs are scheduled. IO, configuration and parallel
//! drivers live in the `adamsep` companion crate.
//!
//! Module map:
//! - [`kernel`]: finite real vectors and splittable counter-based random streams.
//! - [`problems`]: smooth test objectives and unbiased stochastic gradient oracles.
//! - [`optimizers`]: Adam (with the calibrated finite-horizon parameterization), SGD, trajectories.
//! - [`instrument`]: trajectory functionals (energies, quadratic variation, stopping times).
//! - [`lemmas`]: executable pathwise inequalities and the resampled descent decomposition.
//! - [`lowerbound`]: one-shock hard instances for SGD with exact event probabilities.
//! - [`tailstudy`]: quantile curves, confidence-exponent fits and the separation summary.

#![cfg_attr(not(test), no_std)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

mod error;
pub mod instrument;
pub mod kernel;
pub mod lemmas;
pub mod lowerbound;
pub mod optimizers;
pub mod problems;
pub mod tailstudy;

pub use error::{Error, Result};
pub use kernel::{Dist, RealVec, RngStream};
pub use optimizers::{AdamParams, AdamState, OptimizerSpec, StepSchedule, Trajectory};
pub use problems::{Noise, Objective, Oracle};
