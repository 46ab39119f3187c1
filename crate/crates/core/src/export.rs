//! Ranking bundles for the map and list views: one file per subject,
//! measure, audience and covariate, plus a manifest describing the run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use exmap_glmm::{logistic, FitResult, InstitutionScore, InterceptModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::{GeoTable, InstitutionAggregate};
use crate::error::{CoreError, Result};
use crate::sector::{Indicator, Sector};
use crate::subject::Subject;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    HighlyCited,
    HighlyBookmarked,
}

impl Measure {
    pub fn slug(self) -> &'static str {
        match self {
            Measure::HighlyCited => "highly_cited",
            Measure::HighlyBookmarked => "highly_bookmarked",
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Significance {
    Above,
    Below,
    Neither,
}

/// Above when the whole interval lies over the mean, below when it lies
/// under it.
pub fn significance_flags(lo: f64, hi: f64, grand_mean: f64) -> Significance {
    if lo > grand_mean {
        Significance::Above
    } else if hi < grand_mean {
        Significance::Below
    } else {
        Significance::Neither
    }
}

/// Ranks 1..=n by probability descending, ties by id ascending.
/// Returns the ranks in input order.
pub fn assign_ranks(items: &[(&str, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        items[b]
            .1
            .total_cmp(&items[a].1)
            .then_with(|| items[a].0.cmp(items[b].0))
    });
    let mut ranks = vec![0; items.len()];
    for (r, i) in order.into_iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

/// `rank_without − rank_with` per institution; both rankings must cover
/// the same institutions.
pub fn rank_delta(with: &BTreeMap<String, usize>, without: &BTreeMap<String, usize>) -> Result<BTreeMap<String, i64>> {
    if with.len() != without.len() || with.keys().any(|k| !without.contains_key(k)) {
        let only_with: Vec<&String> = with.keys().filter(|k| !without.contains_key(*k)).collect();
        let only_without: Vec<&String> = without.keys().filter(|k| !with.contains_key(*k)).collect();
        return Err(CoreError::Consistency(format!(
            "rank sets differ: {} only with covariate {:?}, {} only without {:?}",
            only_with.len(),
            only_with.iter().take(5).collect::<Vec<_>>(),
            only_without.len(),
            only_without.iter().take(5).collect::<Vec<_>>()
        )));
    }
    Ok(with
        .iter()
        .map(|(id, &r)| (id.clone(), without[id] as i64 - r as i64))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub institution_id: String,
    pub name: Option<String>,
    pub country: Option<String>,
    pub lat: Option<f64>,
    pub lon: Option<f64>,
    pub papers: u64,
    pub probability: f64,
    /// Bounds of the 1.39-SE interval used for the comparison views.
    pub lo: f64,
    pub hi: f64,
    pub rank: usize,
    pub rank_delta: Option<i64>,
    pub above_mean: bool,
    pub below_mean: bool,
    /// More than half of the papers sit in buckets whose audience
    /// threshold is at most one reader.
    pub low_threshold: bool,
    /// Mean over the six reader audiences, from the intercept model.
    pub audience_average_probability: Option<f64>,
    /// Probability under every audience, keyed by sector name.
    pub sibling_probabilities: Option<BTreeMap<Sector, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportBundle {
    pub schema_version: u32,
    pub subject: Subject,
    pub measure: Measure,
    pub audience: Option<Sector>,
    pub covariate: Option<String>,
    pub grand_mean_probability: f64,
    /// Intercept-model mean over the six audiences.
    pub overall_mean_probability: Option<f64>,
    pub entries: Vec<BundleEntry>,
    pub diagnostics: Vec<String>,
}

impl ExportBundle {
    pub fn file_name(&self) -> String {
        bundle_file_name(self.subject, self.measure, self.audience, self.covariate.as_deref())
    }

    /// Compact JSON plus a trailing newline.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(self).expect("bundle serializes");
        out.push(b'\n');
        out
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let b: ExportBundle =
            serde_json::from_slice(bytes).map_err(|e| CoreError::Invalid(format!("bundle does not parse: {e}")))?;
        b.validate()?;
        Ok(b)
    }

    /// The structural rules every bundle obeys.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::Invalid(format!("{}: {m}", self.file_name())));
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!("schema_version {} is not {SCHEMA_VERSION}", self.schema_version));
        }
        if (self.measure == Measure::HighlyCited) != self.audience.is_none() {
            return fail("audience must be set exactly for the bookmarked measure".into());
        }
        if !(0.0..=1.0).contains(&self.grand_mean_probability) {
            return fail("grand mean outside [0, 1]".into());
        }
        let mut seen = vec![false; self.entries.len()];
        for e in &self.entries {
            if e.rank == 0 || e.rank > seen.len() || std::mem::replace(&mut seen[e.rank - 1], true) {
                return fail(format!("rank {} of {} breaks the permutation", e.rank, e.institution_id));
            }
            if e.rank_delta.is_some() != self.covariate.is_some() {
                return fail(format!("rank_delta of {} does not match the covariate", e.institution_id));
            }
            if !(e.lo <= e.probability && e.probability <= e.hi) {
                return fail(format!("probability of {} lies outside its interval", e.institution_id));
            }
            let sig = significance_flags(e.lo, e.hi, self.grand_mean_probability);
            if e.above_mean != (sig == Significance::Above) || e.below_mean != (sig == Significance::Below) {
                return fail(format!("flags of {} disagree with the interval", e.institution_id));
            }
        }
        Ok(())
    }
}

pub fn bundle_file_name(subject: Subject, measure: Measure, audience: Option<Sector>, covariate: Option<&str>) -> String {
    format!(
        "{}.{}.{}.{}.json",
        subject.slug(),
        measure.slug(),
        audience.map_or_else(|| "all".to_string(), |s| s.name().to_lowercase()),
        covariate.map_or_else(|| "none".to_string(), str::to_lowercase),
    )
}

/// Inputs for all bundles of one (subject, covariate) pair.
pub struct BundleInputs<'a> {
    pub subject: Subject,
    /// The seven-indicator model without covariate.
    pub plain: &'a FitResult,
    /// The same model with the covariate, when building adjusted bundles.
    pub adjusted: Option<&'a FitResult>,
    pub intercept: Option<&'a InterceptModel>,
    pub aggregates: &'a [InstitutionAggregate],
    pub geo: &'a GeoTable,
}

fn scores_by_cluster(fit: &FitResult) -> Result<BTreeMap<String, Vec<InstitutionScore>>> {
    let mut out: BTreeMap<String, Vec<InstitutionScore>> = BTreeMap::new();
    for s in fit.scores()? {
        out.entry(s.cluster.clone()).or_default().push(s);
    }
    Ok(out)
}

fn ranks_over(scores: &BTreeMap<String, Vec<InstitutionScore>>, members: &BTreeSet<&str>, k: usize) -> BTreeMap<String, usize> {
    let items: Vec<(&str, f64)> = scores
        .iter()
        .filter(|(id, _)| members.contains(id.as_str()))
        .map(|(id, s)| (id.as_str(), s[k].interval.probability))
        .collect();
    let ranks = assign_ranks(&items);
    items.iter().zip(ranks).map(|((id, _), r)| (id.to_string(), r)).collect()
}

/// The bundles of one (subject, covariate): the cited measure and the
/// bookmarked measure under each of the six audiences.
pub fn build_bundles(inputs: &BundleInputs<'_>) -> Result<Vec<ExportBundle>> {
    let fit = inputs.adjusted.unwrap_or(inputs.plain);
    if fit.indicators.len() != Indicator::ALL.len() {
        return Err(CoreError::Consistency(format!(
            "expected a {}-indicator fit, got {}",
            Indicator::ALL.len(),
            fit.indicators.len()
        )));
    }
    let scores = scores_by_cluster(fit)?;
    let members: BTreeSet<&str> = scores.keys().map(String::as_str).collect();
    let plain_scores = match inputs.adjusted {
        Some(_) => Some(scores_by_cluster(inputs.plain)?),
        None => None,
    };
    let aggs: BTreeMap<&str, &InstitutionAggregate> =
        inputs.aggregates.iter().map(|a| (a.institution_id.as_str(), a)).collect();

    let covariate = fit.covariate.clone();
    let overall_mean = inputs.intercept.map(|m| m.probability);
    // Average over audiences, only meaningful for the unadjusted view.
    let audience_average: BTreeMap<&str, f64> = match (inputs.intercept, &covariate) {
        (Some(m), None) => m
            .fit
            .eb
            .iter()
            .map(|e| (e.cluster.as_str(), logistic(m.intercept + e.u.iter().sum::<f64>() / e.u.len() as f64)))
            .collect(),
        _ => BTreeMap::new(),
    };

    let mut common = Vec::new();
    for id in &members {
        if !inputs.geo.contains_key(*id) {
            common.push(format!("{id}: no geography row, coordinates left empty"));
        }
        if !aggs.contains_key(id) {
            return Err(CoreError::Consistency(format!("{id} was fitted but has no aggregate")));
        }
    }

    let mut bundles = Vec::with_capacity(Indicator::ALL.len());
    for (k, indicator) in Indicator::ALL.iter().enumerate() {
        let (measure, audience) = match indicator {
            Indicator::Citations => (Measure::HighlyCited, None),
            Indicator::Readers(s) => (Measure::HighlyBookmarked, Some(*s)),
        };
        let grand_mean = fit.reference_probability(k);
        let ranks = ranks_over(&scores, &members, k);
        let deltas = match &plain_scores {
            Some(ps) => {
                let without = ranks_over(ps, &members, k);
                Some(rank_delta(&ranks, &without)?)
            }
            None => None,
        };
        let mut entries = Vec::with_capacity(scores.len());
        for (id, s) in &scores {
            let score = &s[k];
            let agg = aggs[id.as_str()];
            let geo = inputs.geo.get(id);
            let count = agg.indicators.get(indicator);
            let interval = score.interval.adjusted;
            let sig = significance_flags(interval.lower, interval.upper, grand_mean);
            entries.push(BundleEntry {
                institution_id: id.clone(),
                name: geo.map(|g| g.name.clone()),
                country: agg.country.clone().or_else(|| geo.map(|g| g.country.clone())),
                lat: geo.and_then(|g| g.lat),
                lon: geo.and_then(|g| g.lon),
                papers: agg.papers(),
                probability: score.interval.probability,
                lo: interval.lower,
                hi: interval.upper,
                rank: ranks[id],
                rank_delta: deltas.as_ref().map(|d| d[id]),
                above_mean: sig == Significance::Above,
                below_mean: sig == Significance::Below,
                low_threshold: audience.is_some() && count.is_some_and(|c| c.low_threshold_papers * 2 > c.n),
                audience_average_probability: match audience {
                    Some(_) => audience_average.get(id.as_str()).copied(),
                    None => None,
                },
                sibling_probabilities: audience.map(|_| {
                    Sector::ALL
                        .iter()
                        .enumerate()
                        .map(|(j, sector)| (*sector, s[j].interval.probability))
                        .collect()
                }),
            });
        }
        entries.sort_by_key(|e| e.rank);
        let bundle = ExportBundle {
            schema_version: SCHEMA_VERSION,
            subject: inputs.subject,
            measure,
            audience,
            covariate: covariate.clone(),
            grand_mean_probability: grand_mean,
            overall_mean_probability: if audience.is_some() { overall_mean } else { None },
            entries,
            diagnostics: common.clone(),
        };
        bundle.validate()?;
        bundles.push(bundle);
    }
    Ok(bundles)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestBundle {
    pub file: String,
    pub sha256: String,
    pub subject: Subject,
    pub measure: Measure,
    pub audience: Option<Sector>,
    pub covariate: Option<String>,
    pub entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub corpus_sha256: String,
    /// The effective run configuration.
    pub config: serde_json::Value,
    pub bundles: Vec<ManifestBundle>,
    /// Subjects or models for which no bundle was written, with the reason.
    pub skipped: Vec<String>,
}

impl Manifest {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("manifest serializes");
        out.push(b'\n');
        out
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write each bundle under `dir` and describe it for the manifest.
pub fn write_bundles(dir: &Path, bundles: &[ExportBundle]) -> Result<Vec<ManifestBundle>> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut out = Vec::with_capacity(bundles.len());
    for b in bundles {
        let bytes = b.to_bytes();
        let file = b.file_name();
        let path = dir.join(&file);
        std::fs::write(&path, &bytes).map_err(|e| CoreError::io(&path, e))?;
        out.push(ManifestBundle {
            file,
            sha256: sha256_hex(&bytes),
            subject: b.subject,
            measure: b.measure,
            audience: b.audience,
            covariate: b.covariate.clone(),
            entries: b.entries.len(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_follow_the_interval() {
        assert_eq!(significance_flags(0.12, 0.15, 0.11), Significance::Above);
        assert_eq!(significance_flags(0.05, 0.15, 0.11), Significance::Neither);
        assert_eq!(significance_flags(0.02, 0.08, 0.11), Significance::Below);
    }

    #[test]
    fn ties_rank_by_id() {
        let r = assign_ranks(&[("b", 0.2), ("a", 0.2), ("c", 0.3)]);
        assert_eq!(r, vec![3, 2, 1]);
    }

    #[test]
    fn swapped_pair_gives_opposite_deltas() {
        let with: BTreeMap<String, usize> = [("x".into(), 1), ("y".into(), 2)].into();
        let without: BTreeMap<String, usize> = [("x".into(), 2), ("y".into(), 1)].into();
        let d = rank_delta(&with, &without).unwrap();
        assert_eq!(d["x"], 1);
        assert_eq!(d["y"], -1);
        assert!(rank_delta(&with, &with).unwrap().values().all(|&v| v == 0));
    }

    #[test]
    fn mismatched_sets_are_rejected() {
        let with: BTreeMap<String, usize> = [("x".into(), 1)].into();
        let without: BTreeMap<String, usize> = [("y".into(), 1)].into();
        assert!(rank_delta(&with, &without).is_err());
    }

    #[test]
    fn file_names_encode_the_selection() {
        assert_eq!(
            bundle_file_name(Subject::All, Measure::HighlyBookmarked, Some(Sector::Students), Some("GNI")),
            "all.highly_bookmarked.students.gni.json"
        );
        assert_eq!(
            bundle_file_name(Subject::Area(2700), Measure::HighlyCited, None, None),
            "2700.highly_cited.all.none.json"
        );
    }
}
