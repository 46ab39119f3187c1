//! Marginal log-likelihood of the multivariate binomial model.
//!
//! For a non-negative CSH correlation the random effects of one cluster are
//! written as `u_k = σ_k (√ρ w + √(1-ρ) z_k)` with independent standard
//! normal `w, z_1..z_K`. The cluster integral then nests a single integral
//! over the shared factor `w` around `K` independent integrals over the
//! `z_k`, so an adaptive Gauss–Hermite rule with `Q` nodes costs `Q²K`
//! kernel evaluations instead of `Q^K`. Nodes are centred on the joint
//! posterior mode and scaled by the factorized curvature (marginal curvature
//! for `w`, conditional curvature for each `z_k`); one node reduces to the
//! Laplace approximation.
//!
//! Negative correlations have no such factor representation and fall back
//! to a Laplace approximation on `v = D⁻¹u`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{equicorrelation_inverse, equicorrelation_ln_det, CshCovariance};
use crate::design::{FixedCoding, StackedDesign};
use crate::error::{GlmmError, Result};
use crate::link::{binomial_kernel, logistic};
use crate::real::{log_sum_exp, Dual, Real};
use crate::quadrature::GaussHermite;

/// Correlations this close to 0 or 1 get their gradient component by
/// finite differences; the analytic expression divides by `√ρ`, `√(1-ρ)`.
const RHO_ANALYTIC_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub beta: Vec<f64>,
    pub cov: CshCovariance,
}

/// Which integral approximation produced a likelihood value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Integration {
    AdaptiveQuadrature { nodes: usize },
    Laplace,
}

/// Gradient with respect to `β`, the standard deviations `σ_k` and `ρ`.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalGradient {
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct RowTerm {
    pub k: usize,
    pub y: f64,
    pub n: f64,
    pub lnc: f64,
    pub offset: f64,
}

/// A design bound to a fixed-effect coding, with regressors and binomial
/// coefficients precomputed.
#[derive(Debug, Clone)]
pub struct Model<'a> {
    design: &'a StackedDesign,
    coding: FixedCoding,
    p: usize,
    x: Vec<f64>,
    lnc: Vec<f64>,
}

impl<'a> Model<'a> {
    pub fn new(design: &'a StackedDesign, coding: FixedCoding) -> Self {
        let p = design.num_fixed(coding);
        let mut x = vec![0.0; design.rows().len() * p];
        for (i, row) in design.rows().iter().enumerate() {
            design.fixed_row(row, coding, &mut x[i * p..(i + 1) * p]);
        }
        Self {
            design,
            coding,
            p,
            x,
            lnc: design.ln_coefficients(),
        }
    }

    pub fn design(&self) -> &StackedDesign {
        self.design
    }

    pub fn coding(&self) -> FixedCoding {
        self.coding
    }

    pub fn num_fixed(&self) -> usize {
        self.p
    }

    pub fn num_indicators(&self) -> usize {
        self.design.num_indicators()
    }

    pub(crate) fn regressors(&self, row: usize) -> &[f64] {
        &self.x[row * self.p..(row + 1) * self.p]
    }

    /// Fixed part of the linear predictor for every row.
    pub fn offsets(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.design.rows().len())
            .map(|i| dot(self.regressors(i), beta))
            .collect()
    }

    pub fn check(&self, params: &ModelParams) -> Result<()> {
        if params.beta.len() != self.p {
            return Err(GlmmError::InvalidParameter(format!(
                "expected {} fixed effects, got {}",
                self.p,
                params.beta.len()
            )));
        }
        if params.cov.dim() != self.num_indicators() {
            return Err(GlmmError::InvalidParameter(format!(
                "expected {} variance components, got {}",
                self.num_indicators(),
                params.cov.dim()
            )));
        }
        if params.beta.iter().any(|b| !b.is_finite()) {
            return Err(GlmmError::InvalidParameter("non-finite fixed effect".into()));
        }
        params.cov.validate()?;
        if params.cov.rho < 0.0
            && self.num_indicators() > 1
            && params.cov.rho <= CshCovariance::rho_lower_bound(self.num_indicators())
        {
            return Err(GlmmError::NotPositiveSemiDefinite(
                "correlation at its lower bound gives a singular covariance".into(),
            ));
        }
        Ok(())
    }

    /// Integration scheme used at these parameters.
    pub fn integration(&self, params: &ModelParams, nodes: usize) -> Integration {
        if params.cov.rho >= 0.0 || self.num_indicators() == 1 {
            Integration::AdaptiveQuadrature { nodes }
        } else {
            Integration::Laplace
        }
    }

    pub(crate) fn row_terms(&self, cluster: usize, offsets: &[f64]) -> Vec<RowTerm> {
        let rows = self.design.rows();
        let (start, end) = self.span(cluster);
        (start..end)
            .map(|i| RowTerm {
                k: rows[i].indicator,
                y: rows[i].successes as f64,
                n: rows[i].trials as f64,
                lnc: self.lnc[i],
                offset: offsets[i],
            })
            .collect()
    }

    fn span(&self, cluster: usize) -> (usize, usize) {
        self.design.span(cluster)
    }

    pub(crate) fn effective_rho(&self, params: &ModelParams) -> f64 {
        if self.num_indicators() == 1 {
            0.0
        } else {
            params.cov.rho
        }
    }

    /// Marginal log-likelihood, summed over clusters in a fixed order.
    pub fn log_likelihood(&self, params: &ModelParams, rule: &GaussHermite) -> Result<f64> {
        self.check(params)?;
        let offsets = self.offsets(&params.beta);
        let sigma = params.cov.sigma();
        let rho = self.effective_rho(params);
        let per_cluster: Vec<f64> = (0..self.design.num_clusters())
            .into_par_iter()
            .map(|j| {
                let rows = self.row_terms(j, &offsets);
                if rho >= 0.0 {
                    cluster_quadrature(&rows, &sigma, rho, rule)
                } else {
                    cluster_laplace(&rows, &sigma, rho)
                }
            })
            .collect();
        finite_sum(per_cluster)
    }

    /// Log-likelihood with its gradient. On the quadrature path each cluster
    /// is evaluated in forward-mode dual arithmetic, so the gradient is that
    /// of the adaptive rule itself, node placement included. The Laplace
    /// path and correlations at the edge of the factor representation use
    /// finite differences.
    pub fn log_likelihood_and_gradient(
        &self,
        params: &ModelParams,
        rule: &GaussHermite,
    ) -> Result<(f64, NaturalGradient)> {
        self.check(params)?;
        let k = self.num_indicators();
        let rho = self.effective_rho(params);
        if rho < 0.0 {
            let value = self.log_likelihood(params, rule)?;
            let gradient = self.numeric_gradient(params, rule)?;
            return Ok((value, gradient));
        }
        let offsets = self.offsets(&params.beta);
        let sigma = params.cov.sigma();
        let rho_free = k > 1 && rho >= RHO_ANALYTIC_MARGIN && 1.0 - rho >= RHO_ANALYTIC_MARGIN;
        let per_cluster: Vec<Option<ClusterGradient>> = (0..self.design.num_clusters())
            .into_par_iter()
            .map(|j| {
                let rows = self.row_terms(j, &offsets);
                cluster_gradient(&rows, &sigma, rho, rho_free, rule)
            })
            .collect();

        let mut value = 0.0;
        let mut g_beta = vec![0.0; self.p];
        let mut g_sigma = vec![0.0; k];
        let mut g_rho = 0.0;
        for (j, cg) in per_cluster.into_iter().enumerate() {
            let Some(cg) = cg else {
                // Too many rows for the fixed-width dual numbers.
                let value = self.log_likelihood(params, rule)?;
                let gradient = self.numeric_gradient(params, rule)?;
                return Ok((value, gradient));
            };
            value += cg.value;
            let (start, _) = self.span(j);
            for (i, (d_off, d_sigma)) in cg.offset.iter().zip(&cg.sigma).enumerate() {
                let row = start + i;
                for (g, x) in g_beta.iter_mut().zip(self.regressors(row)) {
                    *g += d_off * x;
                }
                g_sigma[self.design.rows()[row].indicator] += d_sigma;
            }
            g_rho += cg.rho;
        }
        if !value.is_finite() || g_beta.iter().chain(&g_sigma).any(|g| !g.is_finite()) {
            return Err(GlmmError::InvalidParameter("log-likelihood is not finite".into()));
        }
        if k > 1 && !rho_free {
            g_rho = self.numeric_rho_derivative(params, rule)?;
        }
        if k == 1 {
            g_rho = 0.0;
        }
        Ok((
            value,
            NaturalGradient {
                beta: g_beta,
                sigma: g_sigma,
                rho: g_rho,
            },
        ))
    }

    fn numeric_rho_derivative(&self, params: &ModelParams, rule: &GaussHermite) -> Result<f64> {
        let h = 1e-6;
        let at = |rho: f64| {
            let mut p = params.clone();
            p.cov.rho = rho;
            self.log_likelihood(&p, rule)
        };
        let rho = params.cov.rho;
        // Stay on one side of ρ = 0 so both points use the same integrator.
        if rho < h {
            Ok((at(rho + h)? - at(rho)?) / h)
        } else if rho + h > 1.0 {
            Ok((at(rho)? - at(rho - h)?) / h)
        } else {
            Ok((at(rho + h)? - at(rho - h)?) / (2.0 * h))
        }
    }

    fn numeric_gradient(&self, params: &ModelParams, rule: &GaussHermite) -> Result<NaturalGradient> {
        let h = 1e-6;
        let f = |p: &ModelParams| self.log_likelihood(p, rule);
        let mut beta = vec![0.0; self.p];
        for i in 0..self.p {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.beta[i] += h;
            minus.beta[i] -= h;
            beta[i] = (f(&plus)? - f(&minus)?) / (2.0 * h);
        }
        let k = self.num_indicators();
        let sd = params.cov.sigma();
        let mut sigma = vec![0.0; k];
        for i in 0..k {
            let step = |s: f64| {
                let mut p = params.clone();
                p.cov.sigma2[i] = s * s;
                f(&p)
            };
            sigma[i] = if sd[i] > h {
                (step(sd[i] + h)? - step(sd[i] - h)?) / (2.0 * h)
            } else {
                (step(sd[i] + h)? - step(sd[i])?) / h
            };
        }
        let rho = if k > 1 {
            let lo = CshCovariance::rho_lower_bound(k);
            let r = params.cov.rho;
            let hr = h.min((r - lo) / 2.0);
            let at = |rho: f64| {
                let mut p = params.clone();
                p.cov.rho = rho;
                f(&p)
            };
            if r + hr >= 0.0 {
                (at(r)? - at(r - hr)?) / hr
            } else {
                (at(r + hr)? - at(r - hr)?) / (2.0 * hr)
            }
        } else {
            0.0
        };
        Ok(NaturalGradient { beta, sigma, rho })
    }
}

/// Marginal log-likelihood of `design` under `params` with `nodes`
/// quadrature points per dimension.
pub fn marginal_log_likelihood(
    design: &StackedDesign,
    coding: FixedCoding,
    params: &ModelParams,
    nodes: usize,
) -> Result<f64> {
    Model::new(design, coding).log_likelihood(params, &GaussHermite::new(nodes.max(1)))
}

/// Log-likelihood when every random effect is zero: independent binomials.
pub fn independent_binomial_log_likelihood(
    design: &StackedDesign,
    coding: FixedCoding,
    beta: &[f64],
) -> f64 {
    let model = Model::new(design, coding);
    let offsets = model.offsets(beta);
    design
        .rows()
        .iter()
        .zip(&offsets)
        .zip(&model.lnc)
        .map(|((r, &eta), lnc)| lnc + binomial_kernel(r.successes as f64, r.trials as f64, eta))
        .sum()
}

fn finite_sum(values: Vec<f64>) -> Result<f64> {
    let total: f64 = values.iter().sum();
    if total.is_finite() {
        Ok(total)
    } else {
        Err(GlmmError::InvalidParameter("log-likelihood is not finite".into()))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) struct JointMode {
    pub w: f64,
    pub z: Vec<f64>,
}

fn joint_objective(rows: &[RowTerm], a: &[f64], b: &[f64], w: f64, z: &[f64]) -> f64 {
    let mut f = -0.5 * w * w;
    for (i, row) in rows.iter().enumerate() {
        f += -0.5 * z[i] * z[i] + binomial_kernel(row.y, row.n, row.offset + a[i] * w + b[i] * z[i]);
    }
    f
}

// Newton ascent on the strictly concave joint log-posterior of (w, z). The
// negative Hessian is an arrow matrix, solved through its Schur complement.
pub(crate) fn joint_mode(rows: &[RowTerm], a: &[f64], b: &[f64]) -> JointMode {
    let m = rows.len();
    let mut w = 0.0;
    let mut z = vec![0.0; m];
    let mut h_wz = vec![0.0; m];
    let mut h_zz = vec![0.0; m];
    let mut g_z = vec![0.0; m];
    let mut trial = vec![0.0; m];
    let mut f = joint_objective(rows, a, b, w, &z);
    for _ in 0..100 {
        let mut g_w = -w;
        let mut h_ww = 1.0;
        for (i, row) in rows.iter().enumerate() {
            let p = logistic(row.offset + a[i] * w + b[i] * z[i]);
            let r = row.y - row.n * p;
            let v = row.n * p * (1.0 - p);
            g_w += a[i] * r;
            g_z[i] = -z[i] + b[i] * r;
            h_ww += a[i] * a[i] * v;
            h_wz[i] = a[i] * b[i] * v;
            h_zz[i] = 1.0 + b[i] * b[i] * v;
        }
        let mut schur = h_ww;
        let mut rhs = g_w;
        for i in 0..m {
            schur -= h_wz[i] * h_wz[i] / h_zz[i];
            rhs -= h_wz[i] * g_z[i] / h_zz[i];
        }
        let dw = rhs / schur;
        let dz: Vec<f64> = (0..m).map(|i| (g_z[i] - h_wz[i] * dw) / h_zz[i]).collect();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..m {
                trial[i] = z[i] + t * dz[i];
            }
            let fw = joint_objective(rows, a, b, w + t * dw, &trial);
            if fw >= f - 1e-12 * f.abs().max(1.0) {
                w += t * dw;
                z.copy_from_slice(&trial);
                f = fw;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        let step = dz.iter().fold((t * dw).abs(), |acc, d| acc.max((t * d).abs()));
        if !accepted || step < 1e-10 {
            break;
        }
    }
    JointMode { w, z }
}

fn cluster_quadrature(rows: &[RowTerm], sigma: &[f64], rho: f64, rule: &GaussHermite) -> f64 {
    let (sr, sc) = (rho.sqrt(), (1.0 - rho).max(0.0).sqrt());
    let offsets: Vec<f64> = rows.iter().map(|r| r.offset).collect();
    let a: Vec<f64> = rows.iter().map(|r| sigma[r.k] * sr).collect();
    let b: Vec<f64> = rows.iter().map(|r| sigma[r.k] * sc).collect();
    adaptive_quadrature(rows, &offsets, &a, &b, rule)
}

struct ClusterGradient {
    value: f64,
    offset: Vec<f64>,
    sigma: Vec<f64>,
    rho: f64,
}

fn cluster_gradient(
    rows: &[RowTerm],
    sigma: &[f64],
    rho: f64,
    rho_free: bool,
    rule: &GaussHermite,
) -> Option<ClusterGradient> {
    match rows.len() {
        0..=1 => Some(dual_cluster::<3>(rows, sigma, rho, rho_free, rule)),
        2..=3 => Some(dual_cluster::<7>(rows, sigma, rho, rho_free, rule)),
        4..=7 => Some(dual_cluster::<15>(rows, sigma, rho, rho_free, rule)),
        8..=15 => Some(dual_cluster::<31>(rows, sigma, rho, rho_free, rule)),
        _ => None,
    }
}

// Slots: row offsets, then row standard deviations, then ρ.
fn dual_cluster<const N: usize>(
    rows: &[RowTerm],
    sigma: &[f64],
    rho: f64,
    rho_free: bool,
    rule: &GaussHermite,
) -> ClusterGradient {
    let m = rows.len();
    let rho_d = if rho_free {
        Dual::<N>::var(rho, 2 * m)
    } else {
        Dual::cst(rho)
    };
    let sr = rho_d.sqrt();
    let sc = (Dual::cst(1.0) - rho_d).sqrt();
    let (sr, sc) = if rho_free {
        (sr, sc)
    } else {
        (Dual::cst(rho.sqrt()), Dual::cst((1.0 - rho).max(0.0).sqrt()))
    };
    let offsets: Vec<Dual<N>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| Dual::var(r.offset, i))
        .collect();
    let sd: Vec<Dual<N>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| Dual::var(sigma[r.k], m + i))
        .collect();
    let a: Vec<Dual<N>> = sd.iter().map(|&s| s * sr).collect();
    let b: Vec<Dual<N>> = sd.iter().map(|&s| s * sc).collect();
    let out = adaptive_quadrature(rows, &offsets, &a, &b, rule);
    ClusterGradient {
        value: out.v,
        offset: out.d[..m].to_vec(),
        sigma: out.d[m..2 * m].to_vec(),
        rho: if rho_free { out.d[2 * m] } else { 0.0 },
    }
}

// Nested adaptive Gauss–Hermite rule for one cluster. The mode is located
// in plain f64 and then refined by one Newton step in `T`, which carries
// the implicit derivative of the mode with respect to the parameters.
fn adaptive_quadrature<T: Real>(
    rows: &[RowTerm],
    offsets: &[T],
    a: &[T],
    b: &[T],
    rule: &GaussHermite,
) -> T {
    let m = rows.len();
    let q = rule.len();
    let plain: Vec<RowTerm> = rows
        .iter()
        .zip(offsets)
        .map(|(r, o)| RowTerm {
            offset: o.value(),
            ..*r
        })
        .collect();
    let av: Vec<f64> = a.iter().map(|x| x.value()).collect();
    let bv: Vec<f64> = b.iter().map(|x| x.value()).collect();
    let start = joint_mode(&plain, &av, &bv);

    let one = T::cst(1.0);
    let curvature = |w: T, z: &[T]| {
        let mut g_w = -w;
        let mut h_ww = one;
        let mut g_z = Vec::with_capacity(m);
        let mut h_wz = Vec::with_capacity(m);
        let mut h_zz = Vec::with_capacity(m);
        for i in 0..m {
            let p = (offsets[i] + a[i] * w + b[i] * z[i]).logistic();
            let r = T::cst(rows[i].y) - p.scale(rows[i].n);
            let v = (p * (one - p)).scale(rows[i].n);
            g_w = g_w + a[i] * r;
            g_z.push(-z[i] + b[i] * r);
            h_ww = h_ww + a[i] * a[i] * v;
            h_wz.push(a[i] * b[i] * v);
            h_zz.push(one + b[i] * b[i] * v);
        }
        (g_w, g_z, h_ww, h_wz, h_zz)
    };

    let w0 = T::cst(start.w);
    let z0: Vec<T> = start.z.iter().map(|&z| T::cst(z)).collect();
    let (g_w, g_z, h_ww, h_wz, h_zz) = curvature(w0, &z0);
    let mut schur = h_ww;
    let mut rhs = g_w;
    for i in 0..m {
        schur = schur - h_wz[i] * h_wz[i] / h_zz[i];
        rhs = rhs - h_wz[i] * g_z[i] / h_zz[i];
    }
    let dw = rhs / schur;
    let w_hat = w0 + dw;
    let z_hat: Vec<T> = (0..m)
        .map(|i| z0[i] + (g_z[i] - h_wz[i] * dw) / h_zz[i])
        .collect();

    let (_, _, h_ww, h_wz, h_zz) = curvature(w_hat, &z_hat);
    let mut schur = h_ww;
    for i in 0..m {
        schur = schur - h_wz[i] * h_wz[i] / h_zz[i];
    }
    let s_w = one / schur.sqrt();
    let ln_s_w = s_w.ln();
    let slope: Vec<T> = (0..m).map(|i| h_wz[i] / h_zz[i]).collect();
    let s_z: Vec<T> = h_zz.iter().map(|&h| one / h.sqrt()).collect();
    let ln_s_z: Vec<T> = s_z.iter().map(|s| s.ln()).collect();
    let ln_w: Vec<f64> = rule.weights.iter().map(|w| w.ln()).collect();

    let mut terms = vec![T::cst(0.0); q];
    let mut outer = Vec::with_capacity(q);
    for (o, &t0) in rule.nodes.iter().enumerate() {
        let w = w_hat + s_w.scale(t0);
        let mut acc = T::cst(ln_w[o] + 0.5 * t0 * t0) - (w * w).scale(0.5) + ln_s_w;
        for i in 0..m {
            let zc = z_hat[i] - slope[i] * (w - w_hat);
            let base = offsets[i] + a[i] * w;
            let row = &rows[i];
            for (iq, &t) in rule.nodes.iter().enumerate() {
                let z = zc + s_z[i].scale(t);
                let eta = base + b[i] * z;
                terms[iq] = T::cst(ln_w[iq] + 0.5 * t * t + row.lnc) - (z * z).scale(0.5)
                    + ln_s_z[i]
                    + eta.scale(row.y)
                    - eta.softplus().scale(row.n);
            }
            acc = acc + log_sum_exp(&terms);
        }
        outer.push(acc);
    }
    log_sum_exp(&outer)
}

// Laplace approximation in v = D⁻¹u, valid for any admissible correlation.
fn cluster_laplace(rows: &[RowTerm], sigma: &[f64], rho: f64) -> f64 {
    let m = rows.len();
    let rinv = equicorrelation_inverse(m, rho);
    let s: Vec<f64> = rows.iter().map(|r| sigma[r.k]).collect();
    let objective = |v: &DVector<f64>| -> f64 {
        let quad = (v.transpose() * &rinv * v)[(0, 0)];
        -0.5 * quad
            + rows
                .iter()
                .enumerate()
                .map(|(i, r)| binomial_kernel(r.y, r.n, r.offset + s[i] * v[i]))
                .sum::<f64>()
    };
    let hessian_at = |v: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let mut g = -(&rinv * v);
        let mut h = rinv.clone();
        for (i, r) in rows.iter().enumerate() {
            let p = logistic(r.offset + s[i] * v[i]);
            g[i] += s[i] * (r.y - r.n * p);
            h[(i, i)] += s[i] * s[i] * r.n * p * (1.0 - p);
        }
        (g, h)
    };
    let mut v = DVector::zeros(m);
    let mut f = objective(&v);
    for _ in 0..100 {
        let (g, h) = hessian_at(&v);
        let Some(chol) = h.cholesky() else { break };
        let step = chol.solve(&g);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &v + &step * t;
            let ft = objective(&trial);
            if ft >= f - 1e-12 * f.abs().max(1.0) {
                v = trial;
                f = ft;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || step.amax() * t < 1e-10 {
            break;
        }
    }
    let (_, h) = hessian_at(&v);
    let ln_det_h = match h.clone().cholesky() {
        Some(c) => 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
        None => f64::NAN,
    };
    let lnc: f64 = rows.iter().map(|r| r.lnc).sum();
    f + lnc - 0.5 * equicorrelation_ln_det(m, rho) - 0.5 * ln_det_h
}
