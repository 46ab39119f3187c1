//! Model fitting: maximum likelihood over the adaptive quadrature with a
//! pseudo-likelihood fallback, standard errors, and the assembled result.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covariance::CshCovariance;
use crate::design::{FixedCoding, StackedDesign};
use crate::eb::{eb_estimates, ClusterEffects};
use crate::error::{GlmmError, NonConvergenceReport, Result};
use crate::likelihood::{Integration, Model, ModelParams, NaturalGradient};
use crate::link::logistic;
use crate::optimize::{minimize, BfgsOptions, Termination};
use crate::pql;
use crate::quadrature::GaussHermite;
use crate::stats::{
    boundary_wald, goldstein_interval, icc, two_sided, wald_variance_test, GoldsteinInterval, Interval, WaldTest,
    NORMAL_95,
};

/// Variance components below this are reported as sitting on the boundary.
pub const BOUNDARY_SIGMA2: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Quadrature ML, then pseudo-likelihood if that fails.
    #[default]
    Auto,
    Ml,
    Pql,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(Self::Auto),
            "ml" => Ok(Self::Ml),
            "pql" | "pl" => Ok(Self::Pql),
            other => Err(format!("unknown method {other:?}; expected auto, ml or pql")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Quadrature nodes per dimension; 1 is the Laplace approximation.
    pub nodes: usize,
    pub gradient_tol: f64,
    pub function_tol: f64,
    pub step_tol: f64,
    pub max_iter: usize,
    pub method: Method,
    pub coding: FixedCoding,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            nodes: 7,
            gradient_tol: 1e-6,
            function_tol: 1e-6,
            step_tol: 1e-8,
            max_iter: 500,
            method: Method::Auto,
            coding: FixedCoding::Dummy,
        }
    }
}

impl FitConfig {
    fn bfgs(&self) -> BfgsOptions {
        BfgsOptions {
            gradient_tol: self.gradient_tol,
            function_tol: self.function_tol,
            step_tol: self.step_tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EstimationMethod {
    AdaptiveQuadrature { nodes: usize },
    /// ML whose optimum has a negative correlation, integrated by Laplace.
    Laplace,
    PseudoLikelihood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedEffect {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
    /// Normal-approximation statistic, reported where a t-test is customary.
    pub z: Option<f64>,
    pub p_value: Option<f64>,
    pub ci95: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponent {
    pub indicator: String,
    pub sigma2: f64,
    pub se: Option<f64>,
    pub wald: WaldTest,
    pub icc: f64,
    pub at_boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    pub se: Option<f64>,
    pub wald: Option<WaldTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub evaluations: usize,
    pub gradient_norm: f64,
    pub termination: Termination,
    /// Why quadrature ML was abandoned, when the fallback ran.
    pub ml_failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub design_hash: String,
    pub indicators: Vec<String>,
    pub covariate: Option<String>,
    pub coding: FixedCoding,
    pub method: EstimationMethod,
    pub fixed: Vec<FixedEffect>,
    /// Fixed part of the linear predictor per indicator at covariate 0.
    pub reference_logits: Vec<f64>,
    pub variance: Vec<VarianceComponent>,
    pub correlation: Correlation,
    /// Marginal log-likelihood at the estimates under the configured
    /// quadrature, whichever method produced them.
    pub log_likelihood: Option<f64>,
    pub num_clusters: usize,
    pub num_rows: usize,
    pub convergence: Convergence,
    pub eb: Vec<ClusterEffects>,
    pub diagnostics: Vec<String>,
}

/// Score of one cluster on one indicator, back on the probability scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstitutionScore {
    pub cluster: String,
    pub indicator: usize,
    pub logit: f64,
    pub se: f64,
    pub interval: GoldsteinInterval,
    /// Probability of an average cluster on this indicator.
    pub reference_probability: f64,
    pub above_mean: bool,
    pub below_mean: bool,
}

impl FitResult {
    pub fn beta(&self) -> Vec<f64> {
        self.fixed.iter().map(|f| f.estimate).collect()
    }

    pub fn params(&self) -> ModelParams {
        ModelParams {
            beta: self.beta(),
            cov: CshCovariance {
                sigma2: self.variance.iter().map(|v| v.sigma2).collect(),
                rho: self.correlation.rho,
            },
        }
    }

    pub fn reference_probability(&self, indicator: usize) -> f64 {
        logistic(self.reference_logits[indicator])
    }

    /// Posterior scores with Goldstein intervals, cluster-major. A cluster
    /// is above (below) the mean when its adjusted interval lies entirely
    /// above (below) the indicator's reference probability.
    pub fn scores(&self) -> Result<Vec<InstitutionScore>> {
        let mut out = Vec::with_capacity(self.eb.len() * self.indicators.len());
        for e in &self.eb {
            for k in 0..self.indicators.len() {
                let logit = self.reference_logits[k] + e.u[k];
                let interval = goldstein_interval(logit, e.se[k])?;
                let reference = self.reference_probability(k);
                out.push(InstitutionScore {
                    cluster: e.cluster.clone(),
                    indicator: k,
                    logit,
                    se: e.se[k],
                    interval,
                    reference_probability: reference,
                    above_mean: interval.adjusted.lower > reference,
                    below_mean: interval.adjusted.upper < reference,
                });
            }
        }
        Ok(out)
    }
}

/// Estimation on an unconstrained scale: `β` as is, `ln σ²_k`, and a
/// logistic map of `ρ` onto `(−1/(K−1), 1)`. One-indicator models have no
/// correlation parameter.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Transform {
    pub p: usize,
    pub k: usize,
}

impl Transform {
    pub fn len(&self) -> usize {
        self.p + self.cov_len()
    }

    pub fn cov_len(&self) -> usize {
        self.k + usize::from(self.k > 1)
    }

    fn rho_lo(&self) -> f64 {
        CshCovariance::rho_lower_bound(self.k)
    }

    pub fn cov_from(&self, psi: &[f64]) -> CshCovariance {
        let sigma2 = psi[..self.k].iter().map(|t| t.exp()).collect();
        let rho = if self.k > 1 {
            let lo = self.rho_lo();
            lo + (1.0 - lo) * logistic(psi[self.k])
        } else {
            0.0
        };
        CshCovariance { sigma2, rho }
    }

    pub fn cov_to(&self, cov: &CshCovariance) -> Vec<f64> {
        let mut psi: Vec<f64> = cov.sigma2.iter().map(|s| s.max(1e-12).ln()).collect();
        if self.k > 1 {
            let lo = self.rho_lo();
            let s = ((cov.rho - lo) / (1.0 - lo)).clamp(1e-9, 1.0 - 1e-9);
            psi.push((s / (1.0 - s)).ln());
        }
        psi
    }

    pub fn params(&self, theta: &[f64]) -> ModelParams {
        ModelParams {
            beta: theta[..self.p].to_vec(),
            cov: self.cov_from(&theta[self.p..]),
        }
    }

    pub fn theta(&self, params: &ModelParams) -> Vec<f64> {
        let mut t = params.beta.clone();
        t.extend(self.cov_to(&params.cov));
        t
    }

    /// Derivatives of (β, σ², ρ) with respect to θ, coordinatewise.
    pub fn jacobian(&self, theta: &[f64]) -> Vec<f64> {
        let mut j = vec![1.0; self.p];
        j.extend(theta[self.p..self.p + self.k].iter().map(|t| t.exp()));
        if self.k > 1 {
            let s = logistic(theta[self.p + self.k]);
            j.push((1.0 - self.rho_lo()) * s * (1.0 - s));
        }
        j
    }

    /// Chain rule from the natural gradient to θ.
    pub fn gradient(&self, params: &ModelParams, g: &NaturalGradient) -> Vec<f64> {
        let mut out = g.beta.clone();
        // dσ/d ln σ² = σ/2.
        out.extend(g.sigma.iter().zip(params.cov.sigma()).map(|(g, s)| g * s / 2.0));
        if self.k > 1 {
            let lo = self.rho_lo();
            let s = (params.cov.rho - lo) / (1.0 - lo);
            out.push(g.rho * (1.0 - lo) * s * (1.0 - s));
        }
        out
    }
}

/// Starting values: pooled logits per indicator, σ² = 0.1, ρ = 0.3, no
/// covariate interaction.
pub fn starting_values(design: &StackedDesign, coding: FixedCoding) -> ModelParams {
    let pooled = design.pooled_logits();
    let k = pooled.len();
    let mut beta = match coding {
        FixedCoding::Dummy => pooled.clone(),
        FixedCoding::EffectCoded => {
            let mean = pooled.iter().sum::<f64>() / k as f64;
            std::iter::once(mean)
                .chain(pooled[..k - 1].iter().map(|b| b - mean))
                .collect()
        }
    };
    beta.resize(design.num_fixed(coding), 0.0);
    ModelParams {
        beta,
        cov: CshCovariance {
            sigma2: vec![0.1; k],
            rho: if k > 1 { 0.3 } else { 0.0 },
        },
    }
}

/// Fits by the configured method; `Auto` falls back to pseudo-likelihood
/// when quadrature ML does not converge.
pub fn fit(design: &StackedDesign, config: &FitConfig) -> Result<FitResult> {
    match config.method {
        Method::Ml => fit_ml(design, config),
        Method::Pql => fit_pql(design, config),
        Method::Auto => match fit_ml(design, config) {
            Ok(r) => Ok(r),
            Err(ml) => {
                let ml_failure = failure_text(&ml);
                tracing::warn!(design = %short(design), %ml_failure, "ML failed, refitting by pseudo-likelihood");
                match fit_pql(design, config) {
                    Ok(mut r) => {
                        r.convergence.ml_failure = Some(ml_failure.clone());
                        r.diagnostics.push(format!("quadrature ML failed ({ml_failure}); pseudo-likelihood used"));
                        Ok(r)
                    }
                    Err(pql) => Err(GlmmError::NonConvergence(NonConvergenceReport {
                        design_hash: design.content_hash(),
                        ml_failure: Some(ml_failure),
                        pql_failure: Some(failure_text(&pql)),
                    })),
                }
            }
        },
    }
}

fn failure_text(e: &GlmmError) -> String {
    match e {
        GlmmError::NonConvergence(r) => r
            .ml_failure
            .clone()
            .or_else(|| r.pql_failure.clone())
            .unwrap_or_else(|| e.to_string()),
        other => other.to_string(),
    }
}

fn short(design: &StackedDesign) -> String {
    design.content_hash()[..12].to_string()
}

/// Maximum likelihood under the adaptive quadrature.
pub fn fit_ml(design: &StackedDesign, config: &FitConfig) -> Result<FitResult> {
    fit_ml_from(design, config, &starting_values(design, config.coding))
}

pub fn fit_ml_from(design: &StackedDesign, config: &FitConfig, start: &ModelParams) -> Result<FitResult> {
    let model = Model::new(design, config.coding);
    model.check(start)?;
    let rule = GaussHermite::new(config.nodes.max(1));
    let tf = Transform {
        p: model.num_fixed(),
        k: model.num_indicators(),
    };
    let scale = design.num_clusters() as f64;
    let objective = |theta: &[f64]| {
        let params = tf.params(theta);
        let (ll, g) = model.log_likelihood_and_gradient(&params, &rule).ok()?;
        let g = tf.gradient(&params, &g);
        Some((-ll / scale, g.iter().map(|v| -v / scale).collect()))
    };
    let min = minimize(objective, &tf.theta(start), &config.bfgs());
    let fail = |what: String| {
        GlmmError::NonConvergence(NonConvergenceReport {
            design_hash: design.content_hash(),
            ml_failure: Some(what),
            pql_failure: None,
        })
    };
    if !min.termination.is_success() {
        return Err(fail(format!(
            "{:?} after {} iterations, gradient norm {:.3e}",
            min.termination,
            min.iterations,
            min.gradient_norm()
        )));
    }
    let params = tf.params(&min.x);
    let mut diagnostics = Vec::new();
    if min.termination == Termination::SmallStep {
        diagnostics.push(format!(
            "optimizer stopped on step size with gradient norm {:.2e}",
            min.gradient_norm()
        ));
    }
    let method = match model.integration(&params, config.nodes) {
        Integration::AdaptiveQuadrature { nodes } => EstimationMethod::AdaptiveQuadrature { nodes },
        Integration::Laplace => {
            diagnostics.push("negative correlation at the optimum: Laplace approximation used".into());
            EstimationMethod::Laplace
        }
    };

    let free = free_coordinates(&tf, &params);
    let info_gradient = |theta: &[f64]| -> Option<Vec<f64>> {
        let params = tf.params(theta);
        let (_, g) = model.log_likelihood_and_gradient(&params, &rule).ok()?;
        Some(tf.gradient(&params, &g).iter().map(|v| -v).collect())
    };
    let se = match observed_information(&info_gradient, &min.x, &free) {
        Some(cov_theta) => natural_se(&cov_theta, &tf.jacobian(&min.x), &free),
        None => {
            diagnostics.push("observed information is not positive definite; standard errors omitted".into());
            vec![None; tf.len()]
        }
    };
    let convergence = Convergence {
        iterations: min.iterations,
        evaluations: min.evaluations,
        gradient_norm: min.gradient_norm(),
        termination: min.termination,
        ml_failure: None,
    };
    assemble(&model, &params, &se, method, convergence, Some(-min.f * scale), diagnostics)
}

/// Pseudo-likelihood (working-variate REML) estimation.
pub fn fit_pql(design: &StackedDesign, config: &FitConfig) -> Result<FitResult> {
    let model = Model::new(design, config.coding);
    let start = starting_values(design, config.coding);
    let out = pql::estimate(&model, &start, config).map_err(|why| {
        GlmmError::NonConvergence(NonConvergenceReport {
            design_hash: design.content_hash(),
            ml_failure: None,
            pql_failure: Some(why),
        })
    })?;
    let params = ModelParams {
        beta: out.beta,
        cov: out.cov,
    };
    let rule = GaussHermite::new(config.nodes.max(1));
    let log_likelihood = model.log_likelihood(&params, &rule).ok();
    let convergence = Convergence {
        iterations: out.iterations,
        evaluations: out.evaluations,
        gradient_norm: out.change,
        termination: Termination::Converged,
        ml_failure: None,
    };
    let mut se = out.beta_se;
    se.extend(out.cov_se);
    assemble(
        &model,
        &params,
        &se,
        EstimationMethod::PseudoLikelihood,
        convergence,
        log_likelihood,
        out.diagnostics,
    )
}

/// Result of the effect-coded refit that yields one overall mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterceptModel {
    pub intercept: f64,
    pub se: Option<f64>,
    /// The grand mean probability, `logistic(intercept)`.
    pub probability: f64,
    pub fit: FitResult,
}

/// Refits `design` without covariate, with an overall intercept and
/// effect-coded indicator contrasts.
pub fn intercept_model(design: &StackedDesign, config: &FitConfig) -> Result<InterceptModel> {
    let plain = design.without_covariate();
    let cfg = FitConfig {
        coding: FixedCoding::EffectCoded,
        ..*config
    };
    let fit = fit(&plain, &cfg)?;
    let intercept = fit.fixed[0].estimate;
    Ok(InterceptModel {
        intercept,
        se: fit.fixed[0].se,
        probability: logistic(intercept),
        fit,
    })
}

// Parameters that are estimated in the interior and so have a curvature-
// based standard error: everything but boundary variances and a boundary
// correlation.
pub(crate) fn free_coordinates(tf: &Transform, params: &ModelParams) -> Vec<bool> {
    let mut free = vec![true; tf.len()];
    for (i, s) in params.cov.sigma2.iter().enumerate() {
        free[tf.p + i] = *s >= BOUNDARY_SIGMA2;
    }
    if tf.k > 1 {
        let lo = CshCovariance::rho_lower_bound(tf.k);
        let r = params.cov.rho;
        let active = params.cov.sigma2.iter().filter(|s| **s >= BOUNDARY_SIGMA2).count();
        free[tf.p + tf.k] = active >= 2 && r - lo > 1e-4 && 1.0 - r > 1e-4;
    }
    free
}

/// Inverse of the observed information over the free coordinates, from
/// central differences of the gradient of the negative log-likelihood.
pub(crate) fn observed_information<G>(neg_gradient: &G, theta: &[f64], free: &[bool]) -> Option<DMatrix<f64>>
where
    G: Fn(&[f64]) -> Option<Vec<f64>>,
{
    let idx: Vec<usize> = (0..theta.len()).filter(|&i| free[i]).collect();
    let m = idx.len();
    if m == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let mut h = DMatrix::zeros(m, m);
    for (c, &i) in idx.iter().enumerate() {
        let step = 1e-5 * theta[i].abs().max(1.0);
        let mut plus = theta.to_vec();
        let mut minus = theta.to_vec();
        plus[i] += step;
        minus[i] -= step;
        let (gp, gm) = (neg_gradient(&plus)?, neg_gradient(&minus)?);
        for (r, &l) in idx.iter().enumerate() {
            h[(r, c)] = (gp[l] - gm[l]) / (2.0 * step);
        }
    }
    let h = (&h + h.transpose()) * 0.5;
    h.cholesky().map(|c| c.inverse())
}

pub(crate) fn natural_se(cov_theta: &DMatrix<f64>, jacobian: &[f64], free: &[bool]) -> Vec<Option<f64>> {
    let mut out = vec![None; free.len()];
    let mut c = 0;
    for (i, is_free) in free.iter().enumerate() {
        if *is_free {
            let v = cov_theta[(c, c)];
            out[i] = (v.is_finite() && v >= 0.0).then(|| jacobian[i].abs() * v.sqrt());
            c += 1;
        }
    }
    out
}

fn assemble(
    model: &Model<'_>,
    params: &ModelParams,
    se: &[Option<f64>],
    method: EstimationMethod,
    convergence: Convergence,
    log_likelihood: Option<f64>,
    mut diagnostics: Vec<String>,
) -> Result<FitResult> {
    let design = model.design();
    let coding = model.coding();
    let p = model.num_fixed();
    let k = model.num_indicators();
    let fixed = design
        .fixed_names(coding)
        .into_iter()
        .zip(&params.beta)
        .zip(&se[..p])
        .map(|((name, &estimate), &se)| {
            let se = se.filter(|s| *s > 0.0);
            FixedEffect {
                name,
                estimate,
                se,
                z: se.map(|s| estimate / s),
                p_value: se.map(|s| two_sided(estimate / s)),
                ci95: se.map(|s| Interval {
                    lower: estimate - NORMAL_95 * s,
                    upper: estimate + NORMAL_95 * s,
                }),
            }
        })
        .collect();

    let mut variance = Vec::with_capacity(k);
    for (i, name) in design.indicators().iter().enumerate() {
        let sigma2 = params.cov.sigma2[i];
        let at_boundary = sigma2 < BOUNDARY_SIGMA2;
        let se_i = se[p + i].filter(|s| *s > 0.0);
        let wald = match (at_boundary, se_i) {
            (false, Some(s)) => wald_variance_test(sigma2, s)?,
            _ => boundary_wald(),
        };
        if at_boundary {
            diagnostics.push(format!("variance of {name} is at the zero boundary ({sigma2:.2e})"));
        }
        variance.push(VarianceComponent {
            indicator: name.clone(),
            sigma2,
            se: se_i,
            wald,
            icc: icc(sigma2),
            at_boundary,
        });
    }
    let correlation = if k > 1 {
        let se_r = se[p + k].filter(|s| *s > 0.0);
        Correlation {
            rho: params.cov.rho,
            se: se_r,
            wald: se_r.map(|s| wald_variance_test(params.cov.rho, s)).transpose()?,
        }
    } else {
        Correlation {
            rho: 0.0,
            se: None,
            wald: None,
        }
    };

    let mut row = vec![0.0; p];
    let reference_logits = (0..k)
        .map(|i| {
            design.regressors_at(i, Some(0.0), coding, &mut row);
            row.iter().zip(&params.beta).map(|(x, b)| x * b).sum()
        })
        .collect();

    Ok(FitResult {
        design_hash: design.content_hash(),
        indicators: design.indicators().to_vec(),
        covariate: design.covariate_name().map(str::to_string),
        coding,
        method,
        fixed,
        reference_logits,
        variance,
        correlation,
        log_likelihood,
        num_clusters: design.num_clusters(),
        num_rows: design.rows().len(),
        convergence,
        eb: eb_estimates(model, params)?,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn transform_round_trips() {
        let tf = Transform { p: 2, k: 3 };
        let params = ModelParams {
            beta: vec![-1.0, 0.5],
            cov: CshCovariance::new(vec![0.2, 0.5, 1.5], -0.3).unwrap(),
        };
        let back = tf.params(&tf.theta(&params));
        for (a, b) in back.beta.iter().zip(&params.beta) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        for (a, b) in back.cov.sigma2.iter().zip(&params.cov.sigma2) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        assert_relative_eq!(back.cov.rho, -0.3, epsilon = 1e-12);
    }

    #[test]
    fn jacobian_matches_differences() {
        let tf = Transform { p: 1, k: 3 };
        let theta = vec![0.3, -1.0, 0.2, 0.7, 0.4];
        let natural = |t: &[f64]| {
            let p = tf.params(t);
            let mut v = p.beta.clone();
            v.extend(&p.cov.sigma2);
            v.push(p.cov.rho);
            v
        };
        let j = tf.jacobian(&theta);
        for i in 0..theta.len() {
            let h = 1e-6;
            let mut a = theta.clone();
            let mut b = theta.clone();
            a[i] += h;
            b[i] -= h;
            let d = (natural(&a)[i] - natural(&b)[i]) / (2.0 * h);
            assert_relative_eq!(j[i], d, max_relative = 1e-7);
        }
    }

    #[test]
    fn method_parses() {
        assert_eq!("PQL".parse::<Method>().unwrap(), Method::Pql);
        assert!("mcmc".parse::<Method>().is_err());
    }
}
