//! Pseudo-likelihood fallback. Each outer iteration linearizes the logit
//! model about the current fixed and random effects, producing working
//! variates `z = η + (y − nμ)/(nμ(1−μ))` with weights `nμ(1−μ)`, and fits
//! the resulting linear mixed model by REML: GLS-profiled `β`, the CSH
//! covariance by quasi-Newton on the restricted likelihood, and BLUPs for
//! the next expansion point.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::covariance::CshCovariance;
use crate::fit::{free_coordinates, natural_se, observed_information, FitConfig, Transform};
use crate::likelihood::{Model, ModelParams};
use crate::link::logistic;
use crate::optimize::{minimize, BfgsOptions};

const MAX_OUTER: usize = 200;
const OUTER_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;

pub(crate) struct PqlOutcome {
    pub beta: Vec<f64>,
    pub cov: CshCovariance,
    pub beta_se: Vec<Option<f64>>,
    /// Standard errors of σ²_k and then ρ (when K > 1).
    pub cov_se: Vec<Option<f64>>,
    pub iterations: usize,
    pub evaluations: usize,
    /// Largest parameter change in the final outer iteration.
    pub change: f64,
    pub diagnostics: Vec<String>,
}

struct Working {
    z: Vec<f64>,
    inv_w: Vec<f64>,
}

struct Lmm<'m, 'd> {
    model: &'m Model<'d>,
    p: usize,
}

struct Gls {
    beta: DVector<f64>,
    a_inv: DMatrix<f64>,
    reml: f64,
}

impl<'m, 'd> Lmm<'m, 'd> {
    fn cluster_cov(&self, j: usize, cov: &CshCovariance, w: &Working) -> (DMatrix<f64>, usize) {
        let design = self.model.design();
        let (start, _) = design.span(j);
        let rows = design.cluster_rows(j);
        let sd = cov.sigma();
        let m = rows.len();
        let v = DMatrix::from_fn(m, m, |a, b| {
            let (ka, kb) = (rows[a].indicator, rows[b].indicator);
            if a == b {
                cov.sigma2[ka] + w.inv_w[start + a]
            } else {
                cov.rho * sd[ka] * sd[kb]
            }
        });
        (v, start)
    }

    fn x_block(&self, start: usize, m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, self.p, |r, c| self.model.regressors(start + r)[c])
    }

    /// Restricted log-likelihood (up to a constant) with `β` profiled out.
    fn reml(&self, cov: &CshCovariance, w: &Working) -> Option<Gls> {
        let n = self.model.design().num_clusters();
        let parts: Vec<Option<(f64, DMatrix<f64>, DVector<f64>, f64)>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let (v, start) = self.cluster_cov(j, cov, w);
                let m = v.nrows();
                let chol = v.cholesky()?;
                let ln_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                let x = self.x_block(start, m);
                let z = DVector::from_column_slice(&w.z[start..start + m]);
                let vx = chol.solve(&x);
                let vz = chol.solve(&z);
                Some((ln_det, x.transpose() * &vx, x.transpose() * &vz, z.dot(&vz)))
            })
            .collect();
        let mut ln_det = 0.0;
        let mut a = DMatrix::zeros(self.p, self.p);
        let mut b = DVector::zeros(self.p);
        let mut c = 0.0;
        for part in parts {
            let (l, aj, bj, cj) = part?;
            ln_det += l;
            a += aj;
            b += bj;
            c += cj;
        }
        let chol = a.cholesky()?;
        let beta = chol.solve(&b);
        let ln_det_a = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let reml = -0.5 * (ln_det + ln_det_a + c - b.dot(&beta));
        reml.is_finite().then(|| Gls {
            beta,
            a_inv: chol.inverse(),
            reml,
        })
    }

    /// Linear predictor `Xβ + BLUP` for every row.
    fn predictor(&self, cov: &CshCovariance, w: &Working, beta: &DVector<f64>) -> Vec<f64> {
        let design = self.model.design();
        let sd = cov.sigma();
        let per_cluster: Vec<Vec<f64>> = (0..design.num_clusters())
            .into_par_iter()
            .map(|j| {
                let (v, start) = self.cluster_cov(j, cov, w);
                let m = v.nrows();
                let rows = design.cluster_rows(j);
                let x = self.x_block(start, m);
                let fixed = &x * beta;
                let resid = DVector::from_column_slice(&w.z[start..start + m]) - &fixed;
                let g = DMatrix::from_fn(m, m, |a, b| {
                    let (ka, kb) = (rows[a].indicator, rows[b].indicator);
                    if a == b {
                        cov.sigma2[ka]
                    } else {
                        cov.rho * sd[ka] * sd[kb]
                    }
                });
                let u = match v.cholesky() {
                    Some(c) => g * c.solve(&resid),
                    None => DVector::zeros(m),
                };
                (fixed + u).as_slice().to_vec()
            })
            .collect();
        per_cluster.concat()
    }
}

fn working(model: &Model<'_>, eta: &[f64]) -> Working {
    let rows = model.design().rows();
    let mut z = Vec::with_capacity(rows.len());
    let mut inv_w = Vec::with_capacity(rows.len());
    for (r, &e) in rows.iter().zip(eta) {
        let n = r.trials as f64;
        let mu = logistic(e).clamp(1e-10, 1.0 - 1e-10);
        let w = n * mu * (1.0 - mu);
        z.push(e + (r.successes as f64 - n * mu) / w);
        inv_w.push(1.0 / w);
    }
    Working { z, inv_w }
}

fn fd_gradient<F: Fn(&[f64]) -> Option<f64>>(f: &F, x: &[f64], h: f64) -> Option<Vec<f64>> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        g[i] = (up - down) / (2.0 * h);
    }
    Some(g)
}

pub(crate) fn estimate(model: &Model<'_>, start: &ModelParams, config: &FitConfig) -> Result<PqlOutcome, String> {
    let p = model.num_fixed();
    let k = model.num_indicators();
    let tf = Transform { p, k };
    let lmm = Lmm { model, p };
    let scale = model.design().num_clusters() as f64;
    let opts = BfgsOptions {
        gradient_tol: config.gradient_tol,
        function_tol: config.function_tol,
        step_tol: config.step_tol,
        max_iter: config.max_iter,
    };

    let mut beta = DVector::from_column_slice(&start.beta);
    let mut psi = tf.cov_to(&start.cov);
    let mut eta = model.offsets(&start.beta);
    let mut evaluations = 0;
    let mut change = f64::INFINITY;

    for iteration in 1..=MAX_OUTER {
        let w = working(model, &eta);
        let objective = |psi: &[f64]| lmm.reml(&tf.cov_from(psi), &w).map(|g| -g.reml / scale);
        let inner = minimize(
            |psi: &[f64]| {
                let f = objective(psi)?;
                Some((f, fd_gradient(&objective, psi, FD_STEP)?))
            },
            &psi,
            &opts,
        );
        evaluations += inner.evaluations * (2 * psi.len() + 1);
        if !inner.f.is_finite() {
            return Err(format!("restricted likelihood undefined in iteration {iteration}"));
        }
        let cov = tf.cov_from(&inner.x);
        let gls = lmm
            .reml(&cov, &w)
            .ok_or_else(|| format!("GLS system singular in iteration {iteration}"))?;
        let old_cov = tf.cov_from(&psi);
        change = (&gls.beta - &beta).amax();
        for (a, b) in cov.sigma2.iter().zip(&old_cov.sigma2) {
            change = change.max((a - b).abs());
        }
        change = change.max((cov.rho - old_cov.rho).abs());
        if !change.is_finite() || gls.beta.amax() > 50.0 {
            return Err(format!("linearization diverged in iteration {iteration}"));
        }
        beta = gls.beta.clone();
        psi = inner.x;
        eta = lmm.predictor(&cov, &w, &beta);

        if change < OUTER_TOL {
            let params = ModelParams {
                beta: beta.as_slice().to_vec(),
                cov: cov.clone(),
            };
            let beta_se = (0..p)
                .map(|i| {
                    let v = gls.a_inv[(i, i)];
                    (v.is_finite() && v > 0.0).then(|| v.sqrt())
                })
                .collect();
            let free = free_coordinates(&tf, &params);
            let total = |psi: &[f64]| lmm.reml(&tf.cov_from(psi), &w).map(|g| -g.reml);
            let neg_gradient = |psi: &[f64]| fd_gradient(&total, psi, 1e-4);
            let mut diagnostics = vec![format!("pseudo-likelihood converged after {iteration} linearizations")];
            let cov_se = match observed_information(&neg_gradient, &psi, &free[p..]) {
                Some(c) => natural_se(&c, &tf.jacobian(&tf.theta(&params))[p..], &free[p..]),
                None => {
                    diagnostics.push("restricted information not positive definite; variance SEs omitted".into());
                    vec![None; tf.cov_len()]
                }
            };
            return Ok(PqlOutcome {
                beta: params.beta,
                cov,
                beta_se,
                cov_se,
                iterations: iteration,
                evaluations,
                change,
                diagnostics,
            });
        }
    }
    Err(format!(
        "no convergence after {MAX_OUTER} linearizations (last change {change:.2e})"
    ))
}
