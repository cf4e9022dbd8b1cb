//! Numerical laboratory for the cutoff, time-randomized Euler-Maruyama scheme
//! for `dX_t = b(t, X_t) dt + dW_t` with a drift in `L^q([0,T]; L^rho(R^d))`.
//!
//! * [`driftlib`]: drift families, cutoffs, admissibility and `alpha`.
//! * [`gaussian`]: heat kernels, their derivatives, and lemma checks.
//! * [`scheme`]: path simulation with reproducible random streams.
//! * [`density`]: exact scheme densities on a grid, reference densities and
//!   Duhamel residuals.
//! * [`analysis`]: error metrics, rate fits, Monte Carlo weak errors and
//!   Gronwall-Volterra constants.
//! * [`study`] and [`suite`]: the rate study and the lemma suite.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision.

// `!(x > y)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod density;
pub mod driftlib;
pub mod error;
pub mod gaussian;
pub mod quadrature;
pub mod rng;
pub mod scalar;
pub mod scheme;
pub mod special;
pub mod study;
pub mod suite;

pub use analysis::{
    fit_rate, gronwall_constant, gronwall_numeric_check, mc_weak_error, small_time_bound, tv_error,
    weighted_sup_error, GronwallCase, GronwallInput, RateReport, RateRow, TestFunction, WeakErrorEstimate,
};
pub use density::{
    duhamel_residual, empirical_gaussian_bound, first_step_density, holder_time_modulus, propagate,
    reference_density, terminal_density, Grid, GridConfig, GridDensity, StepKernel,
};
pub use driftlib::{check_condition, ConditionReport, DriftFamily, DriftSpec, Exponent, Variant};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use scheme::{coupled_terminals, simulate_path, simulate_terminals, PathSample, SchemeParams};
pub use study::{rate_study, StudyConfig, StudyOutcome};
pub use suite::{run_suite, SuiteConfig, SuiteReport};

pub type Drift = DriftSpec<f64>;
pub type Family = DriftFamily<f64>;
pub type Params = SchemeParams<f64>;
pub type Path = PathSample<f64>;
pub type Density = GridDensity<f64>;
pub type DensityGrid = Grid<f64>;
pub type Kernel = StepKernel<f64>;

pub type Drift32 = DriftSpec<f32>;
pub type Family32 = DriftFamily<f32>;
pub type Params32 = SchemeParams<f32>;
pub type Path32 = PathSample<f32>;
pub type Density32 = GridDensity<f32>;
pub type DensityGrid32 = Grid<f32>;
pub type Kernel32 = StepKernel<f32>;
