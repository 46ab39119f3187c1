//! Gauss–Hermite rules against the standard normal density.

use std::f64::consts::PI;

/// Nodes `t_q` and weights `w_q` such that `E[g(T)] ≈ Σ w_q g(t_q)` for
/// `T ~ N(0, 1)`. Exact for polynomials up to degree `2n - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "a Gauss-Hermite rule needs at least one node");
        let (x, w) = physicists_rule(n);
        let nodes = x.iter().map(|x| x * std::f64::consts::SQRT_2).collect();
        let weights = w.iter().map(|w| w / PI.sqrt()).collect();
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

// Newton iteration on the orthonormal Hermite recurrence, weight e^{-x^2}.
fn physicists_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    const EPS: f64 = 1e-15;
    const MAX_ITER: usize = 100;
    let pim4 = PI.powf(-0.25);
    let nf = n as f64;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..MAX_ITER {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let jf = j as f64;
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= EPS {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn moment(rule: &GaussHermite, p: i32) -> f64 {
        rule.nodes
            .iter()
            .zip(&rule.weights)
            .map(|(t, w)| w * t.powi(p))
            .sum()
    }

    #[test]
    fn single_node_is_the_mode() {
        let r = GaussHermite::new(1);
        assert_eq!(r.nodes, vec![0.0]);
        assert_relative_eq!(r.weights[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn normal_moments_are_exact() {
        for n in [3usize, 5, 7, 10, 20] {
            let r = GaussHermite::new(n);
            assert_relative_eq!(moment(&r, 0), 1.0, epsilon = 1e-13);
            assert_relative_eq!(moment(&r, 1), 0.0, epsilon = 1e-13);
            assert_relative_eq!(moment(&r, 2), 1.0, epsilon = 1e-12);
            assert_relative_eq!(moment(&r, 4), 3.0, epsilon = 1e-11);
            if 2 * n > 6 {
                assert_relative_eq!(moment(&r, 6), 15.0, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn seven_point_rule_reference_nodes() {
        // Physicists' nodes for n = 7 scaled by sqrt(2).
        let r = GaussHermite::new(7);
        let expected = [2.651961356835233, 1.673551628767471, 0.816287882858965];
        for (i, e) in expected.iter().enumerate() {
            assert_relative_eq!(r.nodes[i], e * std::f64::consts::SQRT_2, epsilon = 1e-12);
        }
    }
}
