//! Heterogeneous compound symmetry: one variance per indicator and a single
//! correlation shared by every pair.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{GlmmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CshCovariance {
    pub sigma2: Vec<f64>,
    pub rho: f64,
}

impl CshCovariance {
    pub fn new(sigma2: Vec<f64>, rho: f64) -> Result<Self> {
        let cov = Self { sigma2, rho };
        cov.validate()?;
        Ok(cov)
    }

    pub fn dim(&self) -> usize {
        self.sigma2.len()
    }

    /// Smallest correlation for which the matrix stays positive semi-definite.
    pub fn rho_lower_bound(k: usize) -> f64 {
        if k <= 1 {
            -1.0
        } else {
            -1.0 / (k as f64 - 1.0)
        }
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.sigma2.iter().map(|s| s.sqrt()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma2.is_empty() {
            return Err(GlmmError::InvalidParameter("empty variance vector".into()));
        }
        if let Some(bad) = self.sigma2.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(GlmmError::NotPositiveSemiDefinite(format!(
                "variance component {bad} is negative or not finite"
            )));
        }
        let lo = Self::rho_lower_bound(self.dim());
        if !self.rho.is_finite() || self.rho < lo || self.rho > 1.0 {
            return Err(GlmmError::NotPositiveSemiDefinite(format!(
                "correlation {} outside [{lo}, 1] for {} indicators",
                self.rho,
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let k = self.dim();
        let s = self.sigma();
        DMatrix::from_fn(k, k, |a, b| {
            if a == b {
                self.sigma2[a]
            } else {
                self.rho * s[a] * s[b]
            }
        })
    }
}

/// Inverse of the `m × m` equicorrelation matrix `(1 - ρ) I + ρ 11ᵀ`.
pub(crate) fn equicorrelation_inverse(m: usize, rho: f64) -> DMatrix<f64> {
    let denom = 1.0 - rho + m as f64 * rho;
    let off = -rho / ((1.0 - rho) * denom);
    let diag = 1.0 / (1.0 - rho) + off;
    DMatrix::from_fn(m, m, |a, b| if a == b { diag } else { off })
}

/// `ln det` of the `m × m` equicorrelation matrix.
pub(crate) fn equicorrelation_ln_det(m: usize, rho: f64) -> f64 {
    let mf = m as f64;
    (mf - 1.0) * (1.0 - rho).ln() + (1.0 + (mf - 1.0) * rho).ln()
}
