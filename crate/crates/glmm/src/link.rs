//! Logit link and its inverse, plus the numerically stable pieces the
//! binomial log-likelihood needs.

use crate::error::{GlmmError, Result};

/// Log-odds of a probability strictly inside (0, 1).
pub fn logit(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(GlmmError::ProbabilityOutOfRange(p));
    }
    Ok((p / (1.0 - p)).ln())
}

/// `e^z / (1 + e^z)`, evaluated without overflow for large |z|.
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)`.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Binomial log-probability of `y` successes in `n` trials at logit `eta`,
/// without the binomial coefficient.
#[inline]
pub(crate) fn binomial_kernel(y: f64, n: f64, eta: f64) -> f64 {
    y * eta - n * softplus(eta)
}

/// `ln C(n, y)`.
pub(crate) fn ln_binomial_coefficient(n: u64, y: u64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let (n, y) = (n as f64, y as f64);
    ln_gamma(n + 1.0) - ln_gamma(y + 1.0) - ln_gamma(n - y + 1.0)
}
