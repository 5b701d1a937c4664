//! Generalization error of one-step gradient descent and least-squares
//! regression under random Gaussian design: exact closed forms, Chebyshev
//! risk bounds, optimal step sizes, a catalog of Gaussian matrix-moment
//! identities, and a seeded Monte Carlo engine that verifies all of it.
//!
//! The setting: data pairs `y_i = W1 x_i + sigma z_i` with standard-normal
//! covariates and noise, a base weight matrix `W0`, and estimators that see
//! `N` pairs at once — a single gradient step, least-norm interpolation
//! (`N < n`) or ordinary least squares (`N > n`). All first and second
//! moments of the squared test error have exact finite-sample expressions
//! with no hidden constants; this crate implements them and the machinery to
//! check them empirically.
//!
//! Modules:
//!
//! - [`model`]: the scenario types and the actual estimators;
//! - [`closed_form`]: analytic means, second moments, variances, tail bounds
//!   and optimal step sizes, with explicit validity windows;
//! - [`mc`]: streaming, mergeable, deterministic Monte Carlo statistics;
//! - [`identities`]: the identity catalog with analytic evaluators and
//!   sampling oracles;
//! - [`rng`]: the `(seed, stream)` reproducibility contract.

pub mod closed_form;
pub mod identities;
pub mod mc;
pub mod model;
pub mod rng;

pub use closed_form::{BoundResult, Breakdown, LossMoments, Validity};
pub use mc::{EcdfSummary, Estimator, MomentAccumulator, ReplicateSummary};
pub use model::{DesignSample, ProblemConfig, TaskInstance};
