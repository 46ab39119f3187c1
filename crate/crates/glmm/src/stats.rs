//! Small inferential helpers around a fitted model.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{GlmmError, Result};
use crate::link::logistic;

/// Multiplier for intervals whose non-overlap marks a 5% pairwise difference.
pub const GOLDSTEIN_FACTOR: f64 = 1.39;
/// Two-sided 95% normal quantile, rounded as usually reported.
pub const NORMAL_95: f64 = 1.96;
/// Variance of the standard logistic distribution, π²/3.
pub const LOGISTIC_VARIANCE: f64 = std::f64::consts::PI * std::f64::consts::PI / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.lower <= other.upper && other.lower <= self.upper
    }
}

/// Probability-scale intervals around a logit-scale estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoldsteinInterval {
    pub probability: f64,
    /// `±1.39·SE`, for pairwise comparisons.
    pub adjusted: Interval,
    /// `±1.96·SE`.
    pub conventional: Interval,
}

pub fn goldstein_interval(point: f64, se: f64) -> Result<GoldsteinInterval> {
    if !point.is_finite() {
        return Err(GlmmError::InvalidParameter(format!("non-finite estimate {point}")));
    }
    if !(se.is_finite() && se >= 0.0) {
        return Err(GlmmError::InvalidParameter(format!("standard error {se} must be finite and non-negative")));
    }
    let band = |c: f64| Interval {
        lower: logistic(point - c * se),
        upper: logistic(point + c * se),
    };
    Ok(GoldsteinInterval {
        probability: logistic(point),
        adjusted: band(GOLDSTEIN_FACTOR),
        conventional: band(NORMAL_95),
    })
}

/// Intra-class correlation on the latent logistic scale.
pub fn icc(sigma2: f64) -> f64 {
    sigma2 / (LOGISTIC_VARIANCE + sigma2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub z: f64,
    /// One-sided upper-tail p-value.
    pub p_value: f64,
    pub significant: bool,
}

/// One-sided test of a variance (or correlation) against zero at α = 0.05.
pub fn wald_variance_test(estimate: f64, se: f64) -> Result<WaldTest> {
    if !(se.is_finite() && se > 0.0) {
        return Err(GlmmError::InvalidParameter(format!("standard error {se} must be positive")));
    }
    let z = estimate / se;
    let p_value = upper_tail(z);
    Ok(WaldTest {
        z,
        p_value,
        significant: p_value < 0.05,
    })
}

/// The verdict for a component stuck at zero, where the curvature-based
/// standard error is undefined.
pub fn boundary_wald() -> WaldTest {
    WaldTest {
        z: 0.0,
        p_value: 0.5,
        significant: false,
    }
}

pub(crate) fn upper_tail(z: f64) -> f64 {
    let n = Normal::standard();
    1.0 - n.cdf(z)
}

pub(crate) fn two_sided(z: f64) -> f64 {
    2.0 * upper_tail(z.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RSquared {
    pub value: f64,
    pub raw: f64,
    /// True when the raw proportion fell outside [0, 1].
    pub clamped: bool,
}

/// Share of a variance component explained by a covariate.
pub fn r_squared(sigma2_base: f64, sigma2_with: f64) -> Result<RSquared> {
    if !(sigma2_base.is_finite() && sigma2_base > 0.0) {
        return Err(GlmmError::InvalidParameter(format!(
            "baseline variance {sigma2_base} must be positive"
        )));
    }
    let raw = (sigma2_base - sigma2_with) / sigma2_base;
    let value = raw.clamp(0.0, 1.0);
    Ok(RSquared {
        value,
        raw,
        clamped: value != raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn round2(x: f64) -> f64 {
        (x * 100.0).round() / 100.0
    }

    #[test]
    fn goldstein_unit_se() {
        let g = goldstein_interval(0.0, 1.0).unwrap();
        assert_relative_eq!(g.adjusted.lower, 0.199, epsilon = 5e-4);
        assert_relative_eq!(g.adjusted.upper, 0.801, epsilon = 5e-4);
        assert!(g.conventional.lower < g.adjusted.lower);
    }

    #[test]
    fn zero_se_collapses_the_interval() {
        let g = goldstein_interval(-2.0, 0.0).unwrap();
        assert_eq!(g.adjusted.lower, g.probability);
        assert_eq!(g.adjusted.upper, g.probability);
        assert!(goldstein_interval(0.0, -1.0).is_err());
    }

    #[test]
    fn icc_examples() {
        assert_eq!(round2(icc(0.41)), 0.11);
        assert_eq!(round2(icc(0.17)), 0.05);
        assert_eq!(icc(0.0), 0.0);
    }

    #[test]
    fn wald_examples() {
        let w = wald_variance_test(0.29, 0.015).unwrap();
        assert_relative_eq!(w.z, 19.333, epsilon = 1e-3);
        assert!(w.significant);
        let w = wald_variance_test(0.0, 0.3).unwrap();
        assert_eq!(w.z, 0.0);
        assert!(!w.significant);
        assert!(wald_variance_test(0.1, 0.0).is_err());
    }

    #[test]
    fn r_squared_examples() {
        assert_eq!(round2(r_squared(0.80, 0.304).unwrap().value), 0.62);
        assert_eq!(r_squared(0.3, 0.3).unwrap().value, 0.0);
        let neg = r_squared(0.3, 0.33).unwrap();
        assert!(neg.clamped && neg.value == 0.0 && neg.raw < 0.0);
    }

    proptest! {
        #[test]
        fn icc_is_increasing_and_bounded(a in 0.0f64..50.0, d in 1e-6f64..10.0) {
            let (lo, hi) = (icc(a), icc(a + d));
            prop_assert!(lo < hi);
            prop_assert!((0.0..1.0).contains(&lo) && hi < 1.0);
        }

        #[test]
        fn interval_brackets_the_point(p in -8.0f64..8.0, se in 1e-4f64..3.0) {
            let g = goldstein_interval(p, se).unwrap();
            prop_assert!(g.adjusted.lower < g.probability && g.probability < g.adjusted.upper);
            prop_assert!(g.adjusted.lower > 0.0 && g.adjusted.upper < 1.0);
        }
    }
}
