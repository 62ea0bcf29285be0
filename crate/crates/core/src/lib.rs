//! Optimal adaptive measurement policies for quantum PPM receivers.
//!
//! A PPM symbol places a coherent pulse in one of `M` temporal slots; the
//! receiver measures the slots one at a time and may adapt each slot's local
//! measurement to the outcomes already observed. This crate computes the
//! optimal adaptive policy by backward induction over a discretized pair of
//! joint probabilities (current leading candidate, identical tail symbols),
//! retraces the resulting policy into an explicit binary decision tree, and
//! compares its symbol error probability against closed-form reference
//! receivers (Helstrom bound, direct detection, conditional nulling, improved
//! conditional nulling).
//!
//! Modules:
//! - [`model`]: slot-level qubit parametrization and measurement transition kernels
//! - [`baselines`]: closed-form reference receivers and binary-discrimination primitives
//! - [`grid`]: discretization and interpolation of the value-function domain
//! - [`dp`]: backward induction with projective controls, table reuse, caching
//! - [`gk`]: backward induction with generalized-Kennedy (displacement) controls
//! - [`tree`]: policy trees, exact evaluation, Monte Carlo simulation, text round-trip

pub mod baselines;
pub mod dp;
pub mod gk;
pub mod grid;
pub mod model;
pub mod numeric;
pub mod tree;

mod error;

pub use error::{Error, Result};
pub use grid::{GridSpec, Interpolation};
pub use model::{
    config_from_gamma, config_from_mean_photons, Association, LocalMeasurement,
    ModulationConfig, TransitionKernel,
};
