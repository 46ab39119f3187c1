//! The stacked multivariate layout: every cluster contributes one binomial
//! row per observed indicator, and the indicator of a row is identified by
//! dummy coding.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GlmmError, Result};
use crate::link::ln_binomial_coefficient;

/// Per-cluster input to [`StackedDesign::build`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterInput {
    pub id: String,
    /// Cluster-level covariate `x_j`, already standardized.
    pub covariate: Option<f64>,
    /// `(successes, trials)` per indicator, `None` when not observed.
    pub outcomes: Vec<Option<(u64, u64)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignRow {
    pub cluster: usize,
    pub indicator: usize,
    pub successes: u64,
    pub trials: u64,
}

/// How the fixed part of the linear predictor is parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FixedCoding {
    /// One coefficient per indicator and no intercept, plus one
    /// covariate interaction per indicator when a covariate is present.
    #[default]
    Dummy,
    /// Overall intercept plus `K - 1` effect-coded contrasts (the last
    /// indicator carries minus the sum of the others), plus the covariate
    /// interactions when present.
    EffectCoded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackedDesign {
    indicators: Vec<String>,
    clusters: Vec<String>,
    covariate_name: Option<String>,
    covariate: Option<Vec<f64>>,
    rows: Vec<DesignRow>,
    spans: Vec<(usize, usize)>,
    diagnostics: Vec<String>,
}

impl StackedDesign {
    /// Stack cluster outcomes. Rows with zero trials are dropped with a
    /// diagnostic, as are clusters left without any row.
    pub fn build(
        indicators: Vec<String>,
        clusters: Vec<ClusterInput>,
        covariate_name: Option<String>,
    ) -> Result<Self> {
        if indicators.is_empty() {
            return Err(GlmmError::InvalidDesign("no indicators".into()));
        }
        let k = indicators.len();
        let with_cov = covariate_name.is_some();
        let mut diagnostics = Vec::new();
        let mut kept_ids = Vec::new();
        let mut covariate = Vec::new();
        let mut rows = Vec::new();
        let mut spans = Vec::new();
        let mut seen = std::collections::BTreeSet::new();

        for cluster in clusters {
            if !seen.insert(cluster.id.clone()) {
                return Err(GlmmError::InvalidDesign(format!(
                    "cluster {} listed twice",
                    cluster.id
                )));
            }
            if cluster.outcomes.len() != k {
                return Err(GlmmError::InvalidDesign(format!(
                    "cluster {} has {} outcomes, expected {k}",
                    cluster.id,
                    cluster.outcomes.len()
                )));
            }
            let x = match (with_cov, cluster.covariate) {
                (true, Some(x)) if x.is_finite() => Some(x),
                (true, _) => {
                    return Err(GlmmError::InvalidDesign(format!(
                        "cluster {} lacks a finite covariate value",
                        cluster.id
                    )))
                }
                (false, _) => None,
            };
            let index = kept_ids.len();
            let start = rows.len();
            for (indicator, outcome) in cluster.outcomes.iter().enumerate() {
                match *outcome {
                    None => diagnostics.push(format!(
                        "cluster {}: indicator {} missing, row omitted",
                        cluster.id, indicators[indicator]
                    )),
                    Some((_, 0)) => diagnostics.push(format!(
                        "cluster {}: indicator {} has zero trials, row dropped",
                        cluster.id, indicators[indicator]
                    )),
                    Some((y, n)) if y > n => {
                        return Err(GlmmError::InvalidDesign(format!(
                            "cluster {}: {y} successes exceed {n} trials",
                            cluster.id
                        )))
                    }
                    Some((y, n)) => rows.push(DesignRow {
                        cluster: index,
                        indicator,
                        successes: y,
                        trials: n,
                    }),
                }
            }
            if rows.len() == start {
                diagnostics.push(format!("cluster {} has no usable rows, dropped", cluster.id));
                continue;
            }
            spans.push((start, rows.len()));
            kept_ids.push(cluster.id);
            if let Some(x) = x {
                covariate.push(x);
            }
        }

        if kept_ids.len() < 2 {
            return Err(GlmmError::TooFewClusters(kept_ids.len()));
        }
        Ok(Self {
            indicators,
            clusters: kept_ids,
            covariate: with_cov.then_some(covariate),
            covariate_name,
            rows,
            spans,
            diagnostics,
        })
    }

    /// Restrict the design to a subset of indicators, renumbered in the
    /// order given.
    pub fn select_indicators(&self, keep: &[usize]) -> Result<Self> {
        let clusters = self
            .clusters
            .iter()
            .enumerate()
            .map(|(j, id)| {
                let mut outcomes = vec![None; keep.len()];
                for row in self.cluster_rows(j) {
                    if let Some(pos) = keep.iter().position(|&k| k == row.indicator) {
                        outcomes[pos] = Some((row.successes, row.trials));
                    }
                }
                ClusterInput {
                    id: id.clone(),
                    covariate: self.covariate.as_ref().map(|x| x[j]),
                    outcomes,
                }
            })
            .collect();
        let names = keep
            .iter()
            .map(|&k| {
                self.indicators.get(k).cloned().ok_or_else(|| {
                    GlmmError::InvalidDesign(format!("indicator index {k} out of range"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::build(names, clusters, self.covariate_name.clone())
    }

    /// Same rows, covariate removed.
    pub fn without_covariate(&self) -> Self {
        let mut out = self.clone();
        out.covariate = None;
        out.covariate_name = None;
        out
    }

    pub fn indicators(&self) -> &[String] {
        &self.indicators
    }

    pub fn num_indicators(&self) -> usize {
        self.indicators.len()
    }

    pub fn cluster_ids(&self) -> &[String] {
        &self.clusters
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn rows(&self) -> &[DesignRow] {
        &self.rows
    }

    pub fn cluster_rows(&self, cluster: usize) -> &[DesignRow] {
        let (a, b) = self.spans[cluster];
        &self.rows[a..b]
    }

    pub(crate) fn span(&self, cluster: usize) -> (usize, usize) {
        self.spans[cluster]
    }

    pub fn covariate(&self) -> Option<&[f64]> {
        self.covariate.as_deref()
    }

    pub fn covariate_name(&self) -> Option<&str> {
        self.covariate_name.as_deref()
    }

    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    pub fn num_fixed(&self, coding: FixedCoding) -> usize {
        let k = self.num_indicators();
        let interactions = if self.covariate.is_some() { k } else { 0 };
        match coding {
            FixedCoding::Dummy => k + interactions,
            FixedCoding::EffectCoded => k + interactions,
        }
    }

    /// Names of the fixed-effect columns, in coefficient order.
    pub fn fixed_names(&self, coding: FixedCoding) -> Vec<String> {
        let mut names: Vec<String> = match coding {
            FixedCoding::Dummy => self.indicators.clone(),
            FixedCoding::EffectCoded => std::iter::once("Intercept".to_string())
                .chain(
                    self.indicators[..self.num_indicators() - 1]
                        .iter()
                        .map(|n| format!("effect:{n}")),
                )
                .collect(),
        };
        if let Some(cov) = &self.covariate_name {
            names.extend(self.indicators.iter().map(|n| format!("{cov}×{n}")));
        }
        names
    }

    /// Fixed-effect regressors of one row.
    pub fn fixed_row(&self, row: &DesignRow, coding: FixedCoding, out: &mut [f64]) {
        let x = self.covariate.as_ref().map(|x| x[row.cluster]);
        self.regressors_at(row.indicator, x, coding, out);
    }

    /// Regressors for `indicator` at covariate value `x` (ignored when the
    /// design has no covariate). With `x = 0`, the standardized mean, the
    /// interactions vanish and only the main effects remain.
    pub fn regressors_at(&self, indicator: usize, x: Option<f64>, coding: FixedCoding, out: &mut [f64]) {
        let k = self.num_indicators();
        out.iter_mut().for_each(|v| *v = 0.0);
        match coding {
            FixedCoding::Dummy => out[indicator] = 1.0,
            FixedCoding::EffectCoded => {
                out[0] = 1.0;
                if indicator + 1 < k {
                    out[1 + indicator] = 1.0;
                } else {
                    for v in &mut out[1..k] {
                        *v = -1.0;
                    }
                }
            }
        }
        if self.covariate.is_some() {
            out[k + indicator] = x.unwrap_or(0.0);
        }
    }

    /// Content hash used to cache fits of identical designs.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for name in &self.indicators {
            h.update(name.as_bytes());
            h.update([0u8]);
        }
        h.update(self.covariate_name.as_deref().unwrap_or("").as_bytes());
        h.update([0u8]);
        for (j, id) in self.clusters.iter().enumerate() {
            h.update(id.as_bytes());
            h.update([0u8]);
            if let Some(x) = &self.covariate {
                h.update(x[j].to_bits().to_le_bytes());
            }
            for row in self.cluster_rows(j) {
                h.update((row.indicator as u64).to_le_bytes());
                h.update(row.successes.to_le_bytes());
                h.update(row.trials.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Pooled logit of each indicator, clamped away from 0 and 1.
    pub fn pooled_logits(&self) -> Vec<f64> {
        let k = self.num_indicators();
        let mut y = vec![0.0; k];
        let mut n = vec![0.0; k];
        for row in &self.rows {
            y[row.indicator] += row.successes as f64;
            n[row.indicator] += row.trials as f64;
        }
        y.iter()
            .zip(&n)
            .map(|(&y, &n)| {
                let p = if n > 0.0 { ((y + 0.5) / (n + 1.0)).clamp(1e-6, 1.0 - 1e-6) } else { 0.5 };
                (p / (1.0 - p)).ln()
            })
            .collect()
    }

    pub(crate) fn ln_coefficients(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| ln_binomial_coefficient(r.trials, r.successes))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (1..=k).map(|i| format!("d{i}")).collect()
    }

    fn cluster(id: &str, x: Option<f64>, outcomes: Vec<Option<(u64, u64)>>) -> ClusterInput {
        ClusterInput {
            id: id.into(),
            covariate: x,
            outcomes,
        }
    }

    #[test]
    fn two_institutions_seven_indicators_stack_to_fourteen_rows() {
        let full = |y| (0..7).map(|_| Some((y, 100))).collect::<Vec<_>>();
        let d = StackedDesign::build(
            names(7),
            vec![cluster("1", Some(10.0), full(10)), cluster("2", Some(45.0), full(12))],
            Some("x".into()),
        )
        .unwrap();
        assert_eq!(d.rows().len(), 14);
        let mut x = vec![0.0; d.num_fixed(FixedCoding::Dummy)];
        for row in d.rows() {
            d.fixed_row(row, FixedCoding::Dummy, &mut x);
            assert_eq!(x[..7].iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(x[row.indicator], 1.0);
            let xj = if row.cluster == 0 { 10.0 } else { 45.0 };
            assert_eq!(x[7 + row.indicator], xj);
        }
    }

    #[test]
    fn no_covariate_means_no_interaction_columns() {
        let d = StackedDesign::build(
            names(3),
            vec![
                cluster("a", None, vec![Some((1, 5)); 3]),
                cluster("b", None, vec![Some((2, 5)); 3]),
            ],
            None,
        )
        .unwrap();
        assert!(d.covariate().is_none());
        assert_eq!(d.num_fixed(FixedCoding::Dummy), 3);
        assert_eq!(d.fixed_names(FixedCoding::Dummy), names(3));
    }

    #[test]
    fn zero_trial_row_is_dropped_with_diagnostic() {
        let d = StackedDesign::build(
            names(2),
            vec![
                cluster("a", None, vec![Some((1, 5)), Some((0, 0))]),
                cluster("b", None, vec![Some((2, 5)), Some((1, 4))]),
            ],
            None,
        )
        .unwrap();
        assert_eq!(d.rows().len(), 3);
        assert_eq!(d.cluster_rows(0).len(), 1);
        assert!(d.diagnostics()[0].contains("zero trials"));
    }

    #[test]
    fn fewer_than_two_clusters_is_an_error() {
        let err = StackedDesign::build(
            names(1),
            vec![cluster("a", None, vec![Some((1, 5))])],
            None,
        )
        .unwrap_err();
        assert!(matches!(err, GlmmError::TooFewClusters(1)));
    }

    #[test]
    fn successes_above_trials_rejected() {
        let r = StackedDesign::build(
            names(1),
            vec![
                cluster("a", None, vec![Some((6, 5))]),
                cluster("b", None, vec![Some((1, 5))]),
            ],
            None,
        );
        assert!(matches!(r, Err(GlmmError::InvalidDesign(_))));
    }

    #[test]
    fn effect_coding_rows_sum_to_intercept_only() {
        let d = StackedDesign::build(
            names(3),
            vec![
                cluster("a", None, vec![Some((1, 5)); 3]),
                cluster("b", None, vec![Some((2, 5)); 3]),
            ],
            None,
        )
        .unwrap();
        let mut total = vec![0.0; 3];
        let mut x = vec![0.0; 3];
        for row in d.cluster_rows(0) {
            d.fixed_row(row, FixedCoding::EffectCoded, &mut x);
            for (t, v) in total.iter_mut().zip(&x) {
                *t += v;
            }
        }
        assert_eq!(total, vec![3.0, 0.0, 0.0]);
    }

    #[test]
    fn hash_is_order_sensitive_and_stable() {
        let a = StackedDesign::build(
            names(1),
            vec![
                cluster("a", None, vec![Some((1, 5))]),
                cluster("b", None, vec![Some((2, 5))]),
            ],
            None,
        )
        .unwrap();
        assert_eq!(a.content_hash(), a.clone().content_hash());
        let b = StackedDesign::build(
            names(1),
            vec![
                cluster("a", None, vec![Some((1, 5))]),
                cluster("b", None, vec![Some((3, 5))]),
            ],
            None,
        )
        .unwrap();
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn selecting_one_indicator_keeps_its_rows() {
        let d = StackedDesign::build(
            names(3),
            vec![
                cluster("a", None, vec![Some((1, 5)), Some((2, 6)), Some((3, 7))]),
                cluster("b", None, vec![Some((2, 5)), None, Some((1, 9))]),
            ],
            None,
        )
        .unwrap();
        let s = d.select_indicators(&[2]).unwrap();
        assert_eq!(s.indicators(), &["d3".to_string()]);
        let trials: Vec<u64> = s.rows().iter().map(|r| r.trials).collect();
        assert_eq!(trials, vec![7, 9]);
    }
}
