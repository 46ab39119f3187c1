//! BFGS with a strong-Wolfe line search, for smooth unconstrained problems.
//!
//! The objective returns `None` where it cannot be evaluated; the line
//! search treats such points as infinitely bad and backs off.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_LINE_EVALS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfgsOptions {
    /// Sup-norm of the gradient below which a point counts as stationary.
    pub gradient_tol: f64,
    /// Relative objective change required alongside a small gradient.
    pub function_tol: f64,
    /// Sup-norm step length treated as a stall.
    pub step_tol: f64,
    pub max_iter: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            gradient_tol: 1e-6,
            function_tol: 1e-6,
            step_tol: 1e-8,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Small gradient and small relative change.
    Converged,
    /// The step collapsed while the gradient was already small; accepted.
    SmallStep,
    /// The step collapsed far from stationarity.
    Stalled,
    LineSearchFailed,
    MaxIterations,
    NotFinite,
}

impl Termination {
    pub fn is_success(self) -> bool {
        matches!(self, Self::Converged | Self::SmallStep)
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

impl Minimum {
    pub fn gradient_norm(&self) -> f64 {
        sup_norm(&self.gradient)
    }
}

struct Point {
    x: DVector<f64>,
    f: f64,
    g: DVector<f64>,
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `objective` from `x0`. The closure returns the value and
/// gradient, or `None` outside the domain.
pub fn minimize<F>(mut objective: F, x0: &[f64], options: &BfgsOptions) -> Minimum
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut evaluations = 0;
    let mut eval = |x: &DVector<f64>, count: &mut usize| -> Option<Point> {
        *count += 1;
        let (f, g) = objective(x.as_slice())?;
        (f.is_finite() && g.iter().all(|v| v.is_finite())).then(|| Point {
            x: x.clone(),
            f,
            g: DVector::from_vec(g),
        })
    };

    let start = DVector::from_column_slice(x0);
    let Some(mut cur) = eval(&start, &mut evaluations) else {
        return Minimum {
            x: x0.to_vec(),
            f: f64::NAN,
            gradient: vec![f64::NAN; n],
            iterations: 0,
            evaluations,
            termination: Termination::NotFinite,
        };
    };
    let finish = |p: Point, iterations, evaluations, termination| Minimum {
        x: p.x.as_slice().to_vec(),
        f: p.f,
        gradient: p.g.as_slice().to_vec(),
        iterations,
        evaluations,
        termination,
    };
    if cur.g.amax() < options.gradient_tol {
        return finish(cur, 0, evaluations, Termination::Converged);
    }

    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    for iter in 1..=options.max_iter {
        let mut dir = -(&h_inv * &cur.g);
        let mut slope = dir.dot(&cur.g);
        if slope >= 0.0 {
            // Curvature information went bad; restart along steepest descent.
            h_inv.fill_with_identity();
            dir = -cur.g.clone();
            slope = dir.dot(&cur.g);
        }
        let alpha0 = if first { (1.0 / dir.amax()).min(1.0) } else { 1.0 };
        let Some(next) = line_search(&mut eval, &mut evaluations, &cur, &dir, slope, alpha0) else {
            return finish(cur, iter, evaluations, Termination::LineSearchFailed);
        };

        let s = &next.x - &cur.x;
        let y = &next.g - &cur.g;
        let rel_change = (cur.f - next.f).abs() / cur.f.abs().max(1.0);
        let step = s.amax();
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                // Scale the initial inverse Hessian to the observed curvature.
                h_inv *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            h_inv += (&s * s.transpose()) * (rho * (1.0 + rho * yhy))
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
            first = false;
        }
        cur = next;

        let gnorm = cur.g.amax();
        if gnorm < options.gradient_tol && rel_change < options.function_tol {
            return finish(cur, iter, evaluations, Termination::Converged);
        }
        if step < options.step_tol {
            let outcome = if gnorm < options.gradient_tol.sqrt() {
                Termination::SmallStep
            } else {
                Termination::Stalled
            };
            return finish(cur, iter, evaluations, outcome);
        }
    }
    finish(cur, options.max_iter, evaluations, Termination::MaxIterations)
}

// Nocedal & Wright's bracketing search with cubic interpolation in the zoom.
fn line_search<E>(
    eval: &mut E,
    evaluations: &mut usize,
    cur: &Point,
    dir: &DVector<f64>,
    slope0: f64,
    alpha0: f64,
) -> Option<Point>
where
    E: FnMut(&DVector<f64>, &mut usize) -> Option<Point>,
{
    let at = |alpha: f64, eval: &mut E, count: &mut usize| -> Option<(Point, f64)> {
        let p = eval(&(&cur.x + dir * alpha), count)?;
        let d = p.g.dot(dir);
        Some((p, d))
    };

    let mut prev_alpha = 0.0;
    let mut prev_f = cur.f;
    let mut prev_d = slope0;
    let mut alpha = alpha0;
    let mut used = 0;
    // Best point satisfying sufficient decrease, kept in case zoom gives up.
    let mut fallback: Option<Point> = None;

    while used < MAX_LINE_EVALS {
        used += 1;
        let Some((p, d)) = at(alpha, eval, evaluations) else {
            // Outside the domain: shrink towards the last good point.
            alpha = prev_alpha + 0.25 * (alpha - prev_alpha);
            if alpha - prev_alpha < 1e-16 {
                break;
            }
            continue;
        };
        if p.f > cur.f + C1 * alpha * slope0 || (used > 1 && p.f >= prev_f) {
            return zoom(
                eval, evaluations, cur, dir, slope0, (prev_alpha, prev_f, prev_d), (alpha, p.f, d), fallback,
            );
        }
        if d.abs() <= -C2 * slope0 {
            return Some(p);
        }
        if d >= 0.0 {
            let hi = (prev_alpha, prev_f, prev_d);
            let lo_f = p.f;
            return zoom(eval, evaluations, cur, dir, slope0, (alpha, lo_f, d), hi, Some(p));
        }
        prev_alpha = alpha;
        prev_f = p.f;
        prev_d = d;
        fallback = Some(p);
        alpha *= 2.0;
    }
    fallback
}

#[allow(clippy::too_many_arguments)]
fn zoom<E>(
    eval: &mut E,
    evaluations: &mut usize,
    cur: &Point,
    dir: &DVector<f64>,
    slope0: f64,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    mut fallback: Option<Point>,
) -> Option<Point>
where
    E: FnMut(&DVector<f64>, &mut usize) -> Option<Point>,
{
    for _ in 0..MAX_LINE_EVALS {
        let alpha = interpolate(lo, hi);
        let Some(p) = eval(&(&cur.x + dir * alpha), evaluations) else {
            hi = (alpha, f64::INFINITY, f64::NAN);
            continue;
        };
        let d = p.g.dot(dir);
        if p.f > cur.f + C1 * alpha * slope0 || p.f >= lo.1 {
            hi = (alpha, p.f, d);
        } else {
            if d.abs() <= -C2 * slope0 {
                return Some(p);
            }
            if d * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (alpha, p.f, d);
            fallback = Some(p);
        }
        if (hi.0 - lo.0).abs() < 1e-14 * lo.0.abs().max(1e-10) {
            break;
        }
    }
    // Sufficient decrease without the curvature condition still makes
    // progress; BFGS skips the update if the curvature pair is unusable.
    fallback.filter(|p| p.f < cur.f)
}

// Minimizer of the cubic through both ends, safeguarded into the interior.
fn interpolate(lo: (f64, f64, f64), hi: (f64, f64, f64)) -> f64 {
    let (a, fa, da) = lo;
    let (b, fb, db) = hi;
    let (left, right) = (a.min(b), a.max(b));
    let width = right - left;
    let bisect = 0.5 * (a + b);
    if !(fb.is_finite() && db.is_finite()) {
        return bisect;
    }
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return bisect;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    if t.is_finite() && t > left + 0.1 * width && t < right - 0.1 * width {
        t
    } else {
        bisect
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Some((f, g))
    }

    #[test]
    fn solves_rosenbrock() {
        let opts = BfgsOptions {
            gradient_tol: 1e-8,
            function_tol: 1e-12,
            ..Default::default()
        };
        let m = minimize(rosenbrock, &[-1.2, 1.0], &opts);
        assert_eq!(m.termination, Termination::Converged, "{m:?}");
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6, "{m:?}");
    }

    #[test]
    fn quadratic_converges_in_few_iterations() {
        let scales = [1.0, 10.0, 100.0, 0.5];
        let f = |x: &[f64]| {
            let v = x.iter().zip(&scales).map(|(x, s)| 0.5 * s * (x - 1.0).powi(2)).sum();
            let g = x.iter().zip(&scales).map(|(x, s)| s * (x - 1.0)).collect();
            Some((v, g))
        };
        let m = minimize(f, &[0.0; 4], &BfgsOptions::default());
        assert!(m.termination.is_success());
        assert!(m.iterations < 30, "{} iterations", m.iterations);
    }

    #[test]
    fn domain_walls_are_respected() {
        // ln barrier at x = 0 with the optimum at x = 1.
        let f = |x: &[f64]| (x[0] > 0.0).then(|| (x[0] - x[0].ln(), vec![1.0 - 1.0 / x[0]]));
        let m = minimize(f, &[20.0], &BfgsOptions::default());
        assert!(m.termination.is_success(), "{m:?}");
        assert!((m.x[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn undefined_start_is_reported() {
        let m = minimize(|_| None, &[0.0], &BfgsOptions::default());
        assert_eq!(m.termination, Termination::NotFinite);
    }
}
