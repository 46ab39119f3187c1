//! Plain-text fit reports: fixed effects with probabilities at the
//! covariate mean, then variance components with Wald tests, ICCs and,
//! given a covariate-free baseline, explained variance.

use std::fmt::Write;

use crate::design::FixedCoding;
use crate::error::Result;
use crate::fit::{EstimationMethod, FitResult};
use crate::link::logistic;
use crate::stats::{r_squared, RSquared};

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

/// Explained variance per indicator relative to a covariate-free fit.
pub fn explained_variance(base: &FitResult, with: &FitResult) -> Result<Vec<Option<RSquared>>> {
    base.variance
        .iter()
        .zip(&with.variance)
        .map(|(b, w)| {
            if b.at_boundary {
                Ok(None)
            } else {
                r_squared(b.sigma2, w.sigma2).map(Some)
            }
        })
        .collect()
}

pub fn fixed_effects_table(fit: &FitResult) -> String {
    let k = fit.indicators.len();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:>9} {:>8} {:>9} {:>19} {:>8}",
        "Parameter", "Estimate", "SE", "z", "95% CI", "P(x=0)"
    );
    for (i, f) in fit.fixed.iter().enumerate() {
        let probability = match fit.coding {
            FixedCoding::Dummy if i < k => Some(logistic(f.estimate)),
            FixedCoding::EffectCoded if i == 0 => Some(logistic(f.estimate)),
            FixedCoding::EffectCoded if i < k => Some(fit.reference_probability(i - 1)),
            _ => None,
        };
        let ci = f
            .ci95
            .map_or_else(|| "-".to_string(), |c| format!("[{:.2}, {:.2}]", c.lower, c.upper));
        let star = if f.p_value.is_some_and(|p| p < 0.05) { "*" } else { "" };
        let _ = writeln!(
            out,
            "{:<28} {:>9.3} {:>8} {:>9} {:>19} {:>8}",
            f.name,
            f.estimate,
            opt(f.se, 3),
            format!("{}{star}", opt(f.z, 2)),
            ci,
            opt(probability, 2)
        );
    }
    out
}

pub fn variance_table(fit: &FitResult, r2: Option<&[Option<RSquared>]>) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:>9} {:>8} {:>9} {:>6} {:>6}",
        "Variance component", "σ²", "SE", "Wald z", "ICC", "R²"
    );
    for (i, v) in fit.variance.iter().enumerate() {
        let star = if v.wald.significant { "*" } else { "" };
        let r = r2.and_then(|r| r[i]).map(|r| r.value);
        let _ = writeln!(
            out,
            "{:<28} {:>9.3} {:>8} {:>9} {:>6.2} {:>6}{}",
            v.indicator,
            v.sigma2,
            opt(v.se, 3),
            format!("{:.2}{star}", v.wald.z),
            v.icc,
            opt(r, 2),
            if v.at_boundary { "  (boundary)" } else { "" }
        );
    }
    if fit.indicators.len() > 1 {
        let c = &fit.correlation;
        let z = c.wald.map_or_else(|| "-".to_string(), |w| {
            format!("{:.2}{}", w.z, if w.significant { "*" } else { "" })
        });
        let _ = writeln!(out, "{:<28} {:>9.3} {:>8} {:>9}", "CSH correlation", c.rho, opt(c.se, 3), z);
    }
    out
}

/// Full report for one fit, with explained variance when `base` is the
/// same design fitted without the covariate.
pub fn render(fit: &FitResult, base: Option<&FitResult>) -> Result<String> {
    let r2 = match base {
        Some(b) if fit.covariate.is_some() => Some(explained_variance(b, fit)?),
        _ => None,
    };
    let method = match fit.method {
        EstimationMethod::AdaptiveQuadrature { nodes } => format!("ML, adaptive Gauss-Hermite ({nodes} nodes)"),
        EstimationMethod::Laplace => "ML, Laplace approximation".to_string(),
        EstimationMethod::PseudoLikelihood => "pseudo-likelihood (linearized REML)".to_string(),
    };
    let mut out = String::new();
    let _ = writeln!(out, "design     {}", &fit.design_hash[..16]);
    let _ = writeln!(out, "covariate  {}", fit.covariate.as_deref().unwrap_or("none"));
    let _ = writeln!(out, "method     {method}");
    let _ = writeln!(
        out,
        "clusters   {}   rows {}   log-likelihood {}",
        fit.num_clusters,
        fit.num_rows,
        opt(fit.log_likelihood, 3)
    );
    let _ = writeln!(
        out,
        "converged  {:?} after {} iterations (gradient {:.1e})",
        fit.convergence.termination, fit.convergence.iterations, fit.convergence.gradient_norm
    );
    out.push('\n');
    out.push_str(&fixed_effects_table(fit));
    out.push('\n');
    out.push_str(&variance_table(fit, r2.as_deref()));
    let _ = writeln!(out, "\n* p < .05; z uses the normal approximation, Wald tests are one-sided.");
    for d in &fit.diagnostics {
        let _ = writeln!(out, "note: {d}");
    }
    Ok(out)
}
