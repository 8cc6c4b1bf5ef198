//! Batch Bayesian quadrature.
//!
//! Estimates `Z = ∫ ℓ(x) π(x) dx` for non-negative `ℓ` and Gaussian `π` with
//! a square-root warped Gaussian process surrogate, choosing evaluation
//! points in parallel batches by Kriging Believer or Lipschitz-cone local
//! penalisation.
//!
//! Module map:
//! * [`gp`]: squared-exponential GP regression and hyperparameter fitting.
//! * [`quadrature`]: kernel integrals, vanilla and warped quadrature moments,
//!   and the variance acquisition function.
//! * [`optimise`]: multi-start maximisation over a stacked objective.
//! * [`batch`]: batch selection and the outer quadrature loop.
//! * [`mcmc`]: Metropolis–Hastings chains and evidence baselines.
//! * [`experiments`]: benchmark problems, ground truths and CSV traces.

pub mod batch;
pub mod error;
pub mod experiments;
pub mod gp;
pub mod mcmc;
pub mod optimise;
pub mod quadrature;
pub mod rng;

pub use error::{Error, Result};
pub use gp::{GaussianMeasure, GpModel, KernelParams};
pub use quadrature::{IntegralEstimate, WarpedModel};

/// A point in the integration domain.
pub type Point = Vec<f64>;

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
