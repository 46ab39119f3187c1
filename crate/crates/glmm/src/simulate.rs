//! Synthetic data from the model itself, for recovery and calibration
//! studies.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariance::CshCovariance;
use crate::design::{ClusterInput, StackedDesign};
use crate::error::{GlmmError, Result};
use crate::link::logistic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub indicators: Vec<String>,
    pub beta: Vec<f64>,
    pub cov: CshCovariance,
    pub clusters: usize,
    /// Inclusive range for the per-cluster number of trials, shared by all
    /// indicators of a cluster.
    pub trials: (u64, u64),
    /// Interaction slopes per indicator; a standard normal covariate is
    /// drawn per cluster when present.
    pub covariate_slopes: Option<Vec<f64>>,
}

/// A simulated design with the random effects that generated it.
#[derive(Debug, Clone)]
pub struct Simulated {
    pub design: StackedDesign,
    pub effects: Vec<Vec<f64>>,
    pub trials: Vec<u64>,
}

pub fn simulate(spec: &SimulationSpec, seed: u64) -> Result<Simulated> {
    let k = spec.indicators.len();
    if spec.beta.len() != k || spec.cov.dim() != k {
        return Err(GlmmError::InvalidParameter("simulation spec dimensions disagree".into()));
    }
    spec.cov.validate()?;
    let (lo, hi) = spec.trials;
    if lo == 0 || hi < lo {
        return Err(GlmmError::InvalidParameter(format!("bad trial range {lo}..={hi}")));
    }
    let root = covariance_root(&spec.cov);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clusters = Vec::with_capacity(spec.clusters);
    let mut effects = Vec::with_capacity(spec.clusters);
    let mut trials = Vec::with_capacity(spec.clusters);
    for j in 0..spec.clusters {
        let e = DVector::from_fn(root.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = &root * e;
        let x = spec.covariate_slopes.as_ref().map(|_| rng.sample::<f64, _>(StandardNormal));
        let n = rng.random_range(lo..=hi);
        let outcomes = (0..k)
            .map(|i| {
                let slope = spec.covariate_slopes.as_ref().map_or(0.0, |s| s[i] * x.unwrap_or(0.0));
                let p = logistic(spec.beta[i] + slope + u[i]);
                let y = Binomial::new(n, p).expect("probability in [0, 1]").sample(&mut rng);
                Some((y, n))
            })
            .collect();
        clusters.push(ClusterInput {
            id: format!("sim{j:05}"),
            covariate: x,
            outcomes,
        });
        effects.push(u.as_slice().to_vec());
        trials.push(n);
    }
    let covariate_name = spec.covariate_slopes.as_ref().map(|_| "x".to_string());
    Ok(Simulated {
        design: StackedDesign::build(spec.indicators.clone(), clusters, covariate_name)?,
        effects,
        trials,
    })
}

// A K × K' matrix L with L Lᵀ = S. The factor form covers ρ ≥ 0 including
// zero variances; negative correlations go through Cholesky.
fn covariance_root(cov: &CshCovariance) -> DMatrix<f64> {
    let k = cov.dim();
    let s = cov.sigma();
    if cov.rho >= 0.0 {
        let (sr, sc) = (cov.rho.sqrt(), (1.0 - cov.rho).sqrt());
        DMatrix::from_fn(k, k + 1, |r, c| {
            if c == 0 {
                s[r] * sr
            } else if c == r + 1 {
                s[r] * sc
            } else {
                0.0
            }
        })
    } else {
        let jitter = DMatrix::identity(k, k) * 1e-12;
        (cov.matrix() + jitter)
            .cholesky()
            .expect("validated covariance is positive semi-definite")
            .l()
    }
}
