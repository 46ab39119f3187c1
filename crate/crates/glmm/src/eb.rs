//! Empirical Bayes cluster effects: posterior modes of the random effects
//! at given model parameters, with standard errors from the posterior
//! curvature.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::equicorrelation_inverse;
use crate::error::Result;
use crate::likelihood::{joint_mode, Model, ModelParams, RowTerm};
use crate::link::{binomial_kernel, logistic};

/// Posterior summary of one cluster's random effects, one entry per
/// indicator. Indicators without data for the cluster still get a value,
/// borrowed from the correlated indicators that were observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEffects {
    pub cluster: String,
    pub u: Vec<f64>,
    pub se: Vec<f64>,
    pub observed: Vec<bool>,
}

pub fn eb_estimates(model: &Model<'_>, params: &ModelParams) -> Result<Vec<ClusterEffects>> {
    model.check(params)?;
    let design = model.design();
    let offsets = model.offsets(&params.beta);
    let sigma = params.cov.sigma();
    let rho = model.effective_rho(params);
    let k = model.num_indicators();
    Ok((0..design.num_clusters())
        .into_par_iter()
        .map(|j| {
            let rows = model.row_terms(j, &offsets);
            let (u, cov) = if rho >= 0.0 {
                factor_posterior(&rows, &sigma, rho, k)
            } else {
                correlated_posterior(&rows, &sigma, rho, k)
            };
            let mut observed = vec![false; k];
            for r in &rows {
                observed[r.k] = true;
            }
            ClusterEffects {
                cluster: design.cluster_ids()[j].clone(),
                u,
                se: (0..k).map(|i| cov[(i, i)].max(0.0).sqrt()).collect(),
                observed,
            }
        })
        .collect())
}

// For ρ ≥ 0, u = A (w, z) with standard normal (w, z). The mode in (w, z)
// maps onto the mode in u, and the posterior covariance of u is A P⁻¹ Aᵀ
// with P the posterior precision of (w, z); both stay defined when some
// σ_k is zero.
fn factor_posterior(rows: &[RowTerm], sigma: &[f64], rho: f64, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let m = rows.len();
    let (sr, sc) = (rho.sqrt(), (1.0 - rho).max(0.0).sqrt());
    let a: Vec<f64> = rows.iter().map(|r| sigma[r.k] * sr).collect();
    let b: Vec<f64> = rows.iter().map(|r| sigma[r.k] * sc).collect();
    let mode = joint_mode(rows, &a, &b);

    // Map from (w, z_1..z_m) to u_1..u_K.
    let mut map = DMatrix::zeros(k, m + 1);
    for kk in 0..k {
        map[(kk, 0)] = sigma[kk] * sr;
    }
    for (i, r) in rows.iter().enumerate() {
        map[(r.k, i + 1)] = sigma[r.k] * sc;
    }
    let mut precision = DMatrix::identity(m + 1, m + 1);
    for (i, r) in rows.iter().enumerate() {
        let p = logistic(r.offset + a[i] * mode.w + b[i] * mode.z[i]);
        let v = r.n * p * (1.0 - p);
        let col = map.row(r.k).transpose();
        precision += &col * col.transpose() * v;
    }
    let post = precision
        .cholesky()
        .expect("identity plus a PSD matrix is positive definite")
        .inverse();
    let mut cov = &map * post * map.transpose();
    let mut observed = vec![false; k];
    for r in rows {
        observed[r.k] = true;
    }
    let mut latent = DVector::zeros(m + 1);
    latent[0] = mode.w;
    for i in 0..m {
        latent[i + 1] = mode.z[i];
    }
    let u = &map * latent;
    // Unobserved indicators keep their own factor at its prior.
    for kk in 0..k {
        if !observed[kk] {
            cov[(kk, kk)] += sigma[kk] * sigma[kk] * (1.0 - rho);
        }
    }
    (u.as_slice().to_vec(), cov)
}

// For ρ < 0, work in v = D⁻¹u with the equicorrelation prior on all K
// coordinates; the posterior of u is D times that of v.
fn correlated_posterior(rows: &[RowTerm], sigma: &[f64], rho: f64, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let rinv = equicorrelation_inverse(k, rho);
    let objective = |v: &DVector<f64>| -> f64 {
        -0.5 * v.dot(&(&rinv * v))
            + rows
                .iter()
                .map(|r| binomial_kernel(r.y, r.n, r.offset + sigma[r.k] * v[r.k]))
                .sum::<f64>()
    };
    let curvature = |v: &DVector<f64>| {
        let mut g = -(&rinv * v);
        let mut h = rinv.clone();
        for r in rows {
            let s = sigma[r.k];
            let p = logistic(r.offset + s * v[r.k]);
            g[r.k] += s * (r.y - r.n * p);
            h[(r.k, r.k)] += s * s * r.n * p * (1.0 - p);
        }
        (g, h)
    };
    let mut v = DVector::zeros(k);
    let mut f = objective(&v);
    for _ in 0..100 {
        let (g, h) = curvature(&v);
        let Some(chol) = h.cholesky() else { break };
        let step = chol.solve(&g);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let trial = &v + &step * t;
            let ft = objective(&trial);
            if ft >= f - 1e-12 * f.abs().max(1.0) {
                v = trial;
                f = ft;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved || step.amax() * t < 1e-10 {
            break;
        }
    }
    let (_, h) = curvature(&v);
    let cov_v = h.cholesky().map(|c| c.inverse()).unwrap_or_else(|| DMatrix::from_element(k, k, f64::NAN));
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(sigma));
    let u: Vec<f64> = (0..k).map(|i| sigma[i] * v[i]).collect();
    (u, &d * cov_v * &d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::CshCovariance;
    use crate::design::{ClusterInput, FixedCoding, StackedDesign};
    use approx::assert_relative_eq;

    fn design(k: usize, data: &[Vec<Option<(u64, u64)>>]) -> StackedDesign {
        let clusters = data
            .iter()
            .enumerate()
            .map(|(j, rows)| ClusterInput {
                id: format!("c{j:03}"),
                covariate: None,
                outcomes: rows.clone(),
            })
            .collect();
        StackedDesign::build((0..k).map(|i| format!("k{i}")).collect(), clusters, None).unwrap()
    }

    fn params(beta: Vec<f64>, sigma2: Vec<f64>, rho: f64) -> ModelParams {
        ModelParams {
            beta,
            cov: CshCovariance::new(sigma2, rho).unwrap(),
        }
    }

    // Posterior mode and curvature of a single normal random effect by
    // brute-force search on a fine grid.
    fn grid_mode(y: f64, n: f64, beta: f64, s2: f64) -> (f64, f64) {
        let post = |u: f64| binomial_kernel(y, n, beta + u) - 0.5 * u * u / s2;
        let mut best = (f64::NEG_INFINITY, 0.0);
        let mut u = -5.0;
        while u <= 5.0 {
            let v = post(u);
            if v > best.0 {
                best = (v, u);
            }
            u += 1e-5;
        }
        let h = 1e-4;
        let u0 = best.1;
        let curv = -(post(u0 + h) - 2.0 * post(u0) + post(u0 - h)) / (h * h);
        (u0, 1.0 / curv.sqrt())
    }

    #[test]
    fn univariate_mode_matches_grid_search() {
        let d = design(1, &[vec![Some((7, 40))], vec![Some((1, 60))]]);
        let model = Model::new(&d, FixedCoding::Dummy);
        let p = params(vec![-1.8], vec![0.3], 0.0);
        let eb = eb_estimates(&model, &p).unwrap();
        for (e, (y, n)) in eb.iter().zip([(7.0, 40.0), (1.0, 60.0)]) {
            let (mode, se) = grid_mode(y, n, -1.8, 0.3);
            assert_relative_eq!(e.u[0], mode, epsilon = 2e-5);
            assert_relative_eq!(e.se[0], se, max_relative = 1e-4);
        }
    }

    #[test]
    fn factor_and_correlated_forms_agree_at_zero_correlation() {
        let d = design(3, &[vec![Some((3, 40)), Some((10, 90)), None], vec![Some((0, 5)), Some((2, 8)), Some((1, 9))]]);
        let model = Model::new(&d, FixedCoding::Dummy);
        let p = params(vec![-1.5, -1.2, -1.8], vec![0.3, 0.5, 0.2], 0.0);
        let offsets = model.offsets(&p.beta);
        let sigma = p.cov.sigma();
        for j in 0..2 {
            let rows = model.row_terms(j, &offsets);
            let (ua, ca) = factor_posterior(&rows, &sigma, 0.0, 3);
            let (ub, cb) = correlated_posterior(&rows, &sigma, -1e-12, 3);
            for i in 0..3 {
                assert_relative_eq!(ua[i], ub[i], epsilon = 1e-8);
                for l in 0..3 {
                    assert_relative_eq!(ca[(i, l)], cb[(i, l)], epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn unobserved_indicator_borrows_from_correlated_ones() {
        let d = design(2, &[vec![Some((60, 100)), None], vec![Some((10, 100)), Some((10, 100))]]);
        let model = Model::new(&d, FixedCoding::Dummy);
        let p = params(vec![-1.0, -1.0], vec![0.5, 0.5], 0.8);
        let eb = eb_estimates(&model, &p).unwrap();
        assert_eq!(eb[0].observed, vec![true, false]);
        assert!(eb[0].u[0] > 0.5);
        assert!(eb[0].u[1] > 0.3 && eb[0].u[1] < eb[0].u[0]);
        assert!(eb[0].se[1] > eb[0].se[0]);
    }

    #[test]
    fn zero_variance_gives_zero_effects() {
        let d = design(2, &[vec![Some((60, 100)), Some((3, 9))], vec![Some((1, 100)), Some((0, 4))]]);
        let model = Model::new(&d, FixedCoding::Dummy);
        let p = params(vec![-1.0, -2.0], vec![0.0, 0.0], 0.5);
        for e in eb_estimates(&model, &p).unwrap() {
            assert!(e.u.iter().chain(&e.se).all(|v| v.abs() < 1e-12));
        }
    }
}
