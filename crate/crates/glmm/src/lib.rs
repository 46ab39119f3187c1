//! Multivariate binomial multilevel model for ranking clusters on several
//! correlated success-rate indicators at once.
//!
//! Every cluster contributes one binomial row per indicator (a stacked
//! design with dummy-coded indicators), random effects follow a
//! heterogeneous compound-symmetry covariance, and parameters are estimated
//! by maximum likelihood with adaptive Gauss–Hermite quadrature, falling
//! back to a penalized quasi-likelihood fit when that fails. Cluster scores
//! are empirical Bayes posterior modes with Goldstein-adjusted intervals.

pub mod covariance;
pub mod design;
pub mod eb;
pub mod error;
pub mod fit;
pub mod likelihood;
pub mod link;
pub mod optimize;
mod pql;
pub mod quadrature;
mod real;
pub mod report;
pub mod simulate;
pub mod stats;

pub use covariance::CshCovariance;
pub use design::{ClusterInput, DesignRow, FixedCoding, StackedDesign};
pub use eb::{eb_estimates, ClusterEffects};
pub use error::{GlmmError, NonConvergenceReport, Result};
pub use fit::{fit, fit_ml, fit_pql, intercept_model, FitConfig, FitResult, InstitutionScore, InterceptModel, Method};
pub use likelihood::{
    independent_binomial_log_likelihood, marginal_log_likelihood, Integration, Model, ModelParams,
    NaturalGradient,
};
pub use link::{logistic, logit};
pub use quadrature::GaussHermite;
pub use stats::{goldstein_interval, icc, r_squared, wald_variance_test, GoldsteinInterval, Interval, WaldTest};
