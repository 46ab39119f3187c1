//! Institution-level success counts, the selection rules, and country
//! covariates.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::indicators::IndicatorWeights;
use crate::ingest::PaperRecord;
use crate::sector::{Indicator, Sector};
use crate::subject::Subject;

/// Running totals for one (institution, subject, indicator).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub n: u64,
    pub raw_sum: f64,
    /// Papers that sit in a bucket whose reader threshold is 0 or 1.
    pub low_threshold_papers: u64,
}

pub type Accumulated = BTreeMap<(String, Subject, Indicator), Counts>;

/// Sum weights per institution (whole counting: every listed institution
/// gets the full paper). Within one subject area a paper counts once,
/// with its best subject-code weight; "All subject areas" uses the
/// all-subjects weight.
pub fn accumulate(
    weights: &[IndicatorWeights],
    records: &[PaperRecord],
    low_threshold: &BTreeSet<(i32, u16, Sector)>,
) -> Result<Accumulated> {
    let index: HashMap<&str, &PaperRecord> = records.iter().map(|r| (r.paper_id.as_str(), r)).collect();
    let mut out = Accumulated::new();
    for w in weights {
        let paper = index
            .get(w.paper_id.as_str())
            .ok_or_else(|| CoreError::Consistency(format!("weight for unknown paper {}", w.paper_id)))?;
        let is_low = |asjc: u16| match w.indicator {
            Indicator::Readers(s) => low_threshold.contains(&(paper.year, asjc, s)),
            Indicator::Citations => false,
        };
        let mut areas: BTreeMap<Subject, (f64, bool)> = BTreeMap::new();
        for (&asjc, &weight) in &w.per_asjc {
            let e = areas.entry(Subject::of_asjc(asjc)).or_insert((0.0, false));
            e.0 = e.0.max(weight);
            e.1 |= is_low(asjc);
        }
        let any_low = areas.values().any(|(_, l)| *l);
        areas.insert(Subject::All, (w.all_subjects, any_low));
        for inst in &paper.institution_ids {
            for (&subject, &(weight, low)) in &areas {
                let c = out.entry((inst.clone(), subject, w.indicator)).or_default();
                c.n += 1;
                c.raw_sum += weight;
                c.low_threshold_papers += u64::from(low);
            }
        }
    }
    Ok(out)
}

/// Round half away from zero, clamped to `[0, n]`. Sums of fractional
/// weights that land a hair under a half are treated as the half.
pub fn round_successes(raw_sum: f64, n: u64) -> u64 {
    let r = (raw_sum.max(0.0) + 1e-9).round();
    (r as u64).min(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorCount {
    pub n: u64,
    pub y: u64,
    pub raw_sum: f64,
    pub low_threshold_papers: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstitutionAggregate {
    pub institution_id: String,
    pub subject: Subject,
    pub country: Option<String>,
    pub indicators: BTreeMap<Indicator, IndicatorCount>,
    /// Country covariates as supplied.
    pub covariates: BTreeMap<String, f64>,
    /// Z-scores over the included institutions, filled after selection.
    pub standardized: BTreeMap<String, f64>,
}

impl InstitutionAggregate {
    /// Papers, the same on every indicator.
    pub fn papers(&self) -> u64 {
        self.indicators.values().map(|c| c.n).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoEntry {
    pub name: String,
    pub country: String,
    pub lat: Option<f64>,
    pub lon: Option<f64>,
}

pub type GeoTable = BTreeMap<String, GeoEntry>;

/// Country → covariate name → value.
pub type CovariateTable = BTreeMap<String, BTreeMap<String, f64>>;

/// Turn accumulated totals into aggregates with rounded successes and the
/// country covariates of each institution.
pub fn build_aggregates(acc: &Accumulated, geo: &GeoTable, covariates: &CovariateTable) -> Result<Vec<InstitutionAggregate>> {
    let mut grouped: BTreeMap<(Subject, String), BTreeMap<Indicator, IndicatorCount>> = BTreeMap::new();
    for ((inst, subject, ind), c) in acc {
        grouped.entry((*subject, inst.clone())).or_default().insert(
            *ind,
            IndicatorCount {
                n: c.n,
                y: round_successes(c.raw_sum, c.n),
                raw_sum: c.raw_sum,
                low_threshold_papers: c.low_threshold_papers,
            },
        );
    }
    let mut out = Vec::with_capacity(grouped.len());
    for ((subject, inst), indicators) in grouped {
        let ns: BTreeSet<u64> = indicators.values().map(|c| c.n).collect();
        if ns.len() != 1 || indicators.len() != Indicator::ALL.len() {
            return Err(CoreError::Consistency(format!(
                "{inst} in {subject}: indicators disagree on paper counts or are missing"
            )));
        }
        let country = geo.get(&inst).map(|g| g.country.clone());
        let covs = country
            .as_ref()
            .and_then(|c| covariates.get(c))
            .cloned()
            .unwrap_or_default();
        out.push(InstitutionAggregate {
            institution_id: inst,
            subject,
            country,
            indicators,
            covariates: covs,
            standardized: BTreeMap::new(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionCriteria {
    pub min_papers: u64,
    pub min_institutions: usize,
    /// Subject areas an institution must qualify in for "All subject
    /// areas".
    pub min_subjects: usize,
}

impl Default for SelectionCriteria {
    fn default() -> Self {
        Self {
            min_papers: 500,
            min_institutions: 50,
            min_subjects: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum ExclusionReason {
    TooFewPapers { papers: u64, required: u64 },
    /// The subject had too few qualifying institutions and was dropped.
    SubjectTooSmall { institutions: usize, required: usize },
    /// Qualifying presence (enough papers) in too few retained areas.
    TooFewSubjects { subjects: usize, required: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub institution_id: String,
    pub subject: Subject,
    #[serde(flatten)]
    pub reason: ExclusionReason,
}

// Paper minimum plus `extra`, then the institution minimum for the whole
// subject. Returns the institutions kept.
fn apply_subject<'a>(
    subject: Subject,
    rows: &[&'a InstitutionAggregate],
    criteria: &SelectionCriteria,
    extra: &dyn Fn(&InstitutionAggregate) -> Option<ExclusionReason>,
    kept: &mut Vec<InstitutionAggregate>,
    excluded: &mut Vec<Exclusion>,
) -> Vec<&'a InstitutionAggregate> {
    let mut qualifying = Vec::new();
    for &a in rows {
        let reason = if a.papers() < criteria.min_papers {
            Some(ExclusionReason::TooFewPapers {
                papers: a.papers(),
                required: criteria.min_papers,
            })
        } else {
            extra(a)
        };
        match reason {
            Some(reason) => excluded.push(Exclusion {
                institution_id: a.institution_id.clone(),
                subject,
                reason,
            }),
            None => qualifying.push(a),
        }
    }
    if qualifying.len() < criteria.min_institutions {
        for a in &qualifying {
            excluded.push(Exclusion {
                institution_id: a.institution_id.clone(),
                subject,
                reason: ExclusionReason::SubjectTooSmall {
                    institutions: qualifying.len(),
                    required: criteria.min_institutions,
                },
            });
        }
        return Vec::new();
    }
    kept.extend(qualifying.iter().map(|a| (*a).clone()));
    qualifying
}

/// Apply the selection rules. Areas come first: institutions below the
/// paper minimum leave the area, and an area with too few remaining
/// institutions is dropped. An institution enters "All subject areas" if
/// it meets the paper minimum there and is retained in enough areas; the
/// same institution minimum then applies to that roll-up. Output is
/// sorted by (subject, institution).
pub fn select_institutions(
    aggregates: &[InstitutionAggregate],
    criteria: &SelectionCriteria,
) -> (Vec<InstitutionAggregate>, Vec<Exclusion>) {
    let mut sorted: Vec<&InstitutionAggregate> = aggregates.iter().collect();
    sorted.sort_by(|a, b| (a.subject, &a.institution_id).cmp(&(b.subject, &b.institution_id)));
    let mut by_subject: BTreeMap<Subject, Vec<&InstitutionAggregate>> = BTreeMap::new();
    for a in sorted {
        by_subject.entry(a.subject).or_default().push(a);
    }

    let mut kept: Vec<InstitutionAggregate> = Vec::new();
    let mut excluded = Vec::new();
    let mut retained_areas: BTreeMap<&str, usize> = BTreeMap::new();

    for (&subject, rows) in by_subject.iter().filter(|(s, _)| **s != Subject::All) {
        for a in apply_subject(subject, rows, criteria, &|_| None, &mut kept, &mut excluded) {
            *retained_areas.entry(a.institution_id.as_str()).or_default() += 1;
        }
    }
    if let Some(rows) = by_subject.get(&Subject::All) {
        let areas_of = |a: &InstitutionAggregate| {
            let subjects = retained_areas.get(a.institution_id.as_str()).copied().unwrap_or(0);
            (subjects < criteria.min_subjects).then_some(ExclusionReason::TooFewSubjects {
                subjects,
                required: criteria.min_subjects,
            })
        };
        apply_subject(Subject::All, rows, criteria, &areas_of, &mut kept, &mut excluded);
    }
    kept.sort_by(|a, b| (a.subject, &a.institution_id).cmp(&(b.subject, &b.institution_id)));
    excluded.sort_by(|a, b| (a.subject, &a.institution_id).cmp(&(b.subject, &b.institution_id)));
    (kept, excluded)
}

/// Z-scores with the sample standard deviation.
pub fn standardize_covariate(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(CoreError::Invalid("standardization needs at least two values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0 && sd.is_finite()) {
        return Err(CoreError::Invalid("constant covariate cannot be standardized".into()));
    }
    Ok(values.iter().map(|v| (v - mean) / sd).collect())
}

/// Standardize each named covariate over the distinct institutions in
/// `aggregates` (each institution once, whatever its number of subjects)
/// and store the z-scores. Institutions without a value stay without one.
pub fn attach_standardized(aggregates: &mut [InstitutionAggregate], names: &[String]) -> Result<Vec<String>> {
    let mut diagnostics = Vec::new();
    for name in names {
        let per_inst: BTreeMap<&str, f64> = aggregates
            .iter()
            .filter_map(|a| a.covariates.get(name).map(|&v| (a.institution_id.as_str(), v)))
            .collect();
        let ids: Vec<String> = per_inst.keys().map(|s| s.to_string()).collect();
        let raw: Vec<f64> = per_inst.values().copied().collect();
        let z = match standardize_covariate(&raw) {
            Ok(z) => z,
            Err(e) => {
                diagnostics.push(format!("covariate {name}: {e}; not used"));
                continue;
            }
        };
        let z: BTreeMap<String, f64> = ids.into_iter().zip(z).collect();
        let mut missing = BTreeSet::new();
        for a in aggregates.iter_mut() {
            match z.get(&a.institution_id) {
                Some(&v) => {
                    a.standardized.insert(name.clone(), v);
                }
                None => {
                    missing.insert(a.institution_id.clone());
                }
            }
        }
        if !missing.is_empty() {
            diagnostics.push(format!(
                "covariate {name}: no value for {} institution(s), left out of its models",
                missing.len()
            ));
        }
    }
    Ok(diagnostics)
}

fn parse_f64(field: &str, what: &str) -> Result<Option<f64>> {
    let t = field.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    t.parse::<f64>()
        .map(Some)
        .map_err(|_| CoreError::Invalid(format!("{what}: not a number: {t:?}")))
}

/// Read `country` plus one column per covariate.
pub fn read_covariates<R: Read>(src: R) -> Result<CovariateTable> {
    let mut r = crate::table::reader(src);
    let headers = r.headers().map_err(crate::table::err)?.clone();
    if headers.get(0) != Some("country") {
        return Err(CoreError::Invalid("covariate table must start with a country column".into()));
    }
    let mut out = CovariateTable::new();
    for rec in r.records() {
        let rec = rec.map_err(crate::table::err)?;
        let country = rec.get(0).unwrap_or_default().to_string();
        let mut values = BTreeMap::new();
        for (h, v) in headers.iter().zip(rec.iter()).skip(1) {
            if let Some(x) = parse_f64(v, &format!("{country}/{h}"))? {
                values.insert(h.to_string(), x);
            }
        }
        out.insert(country, values);
    }
    Ok(out)
}

pub fn write_covariates<W: Write>(table: &CovariateTable, names: &[&str], out: W) -> Result<()> {
    let mut w = crate::table::writer(out);
    let mut header = vec!["country"];
    header.extend(names);
    w.write_record(&header).map_err(crate::table::err)?;
    for (country, values) in table {
        let mut rec = vec![country.clone()];
        rec.extend(names.iter().map(|n| values.get(*n).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&rec).map_err(crate::table::err)?;
    }
    w.flush().map_err(|e| CoreError::Invalid(e.to_string()))
}

#[derive(Deserialize, Serialize)]
struct GeoRow {
    institution_id: String,
    name: String,
    country: String,
    lat: String,
    lon: String,
}

/// Read `institution_id, name, country, lat, lon`; blank coordinates are
/// allowed.
pub fn read_geo<R: Read>(src: R) -> Result<GeoTable> {
    let mut r = crate::table::reader(src);
    let mut out = GeoTable::new();
    for row in r.deserialize::<GeoRow>() {
        let row = row.map_err(crate::table::err)?;
        let lat = parse_f64(&row.lat, &format!("{} lat", row.institution_id))?;
        let lon = parse_f64(&row.lon, &format!("{} lon", row.institution_id))?;
        out.insert(
            row.institution_id,
            GeoEntry {
                name: row.name,
                country: row.country,
                lat,
                lon,
            },
        );
    }
    Ok(out)
}

pub fn write_geo<W: Write>(geo: &GeoTable, out: W) -> Result<()> {
    let mut w = crate::table::writer(out);
    for (id, g) in geo {
        w.serialize(GeoRow {
            institution_id: id.clone(),
            name: g.name.clone(),
            country: g.country.clone(),
            lat: g.lat.map(|v| v.to_string()).unwrap_or_default(),
            lon: g.lon.map(|v| v.to_string()).unwrap_or_default(),
        })
        .map_err(crate::table::err)?;
    }
    w.flush().map_err(|e| CoreError::Invalid(e.to_string()))
}

/// Long table: one row per (institution, subject, indicator) with the
/// covariates of the institution, raw and as `z_<name>`.
pub fn write_aggregates<W: Write>(aggregates: &[InstitutionAggregate], covariate_names: &[String], out: W) -> Result<()> {
    let mut w = crate::table::writer(out);
    let mut header: Vec<String> = ["institution_id", "country", "subject", "indicator", "n", "y", "raw_sum", "low_threshold_papers"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for n in covariate_names {
        header.push(n.clone());
        header.push(format!("z_{n}"));
    }
    w.write_record(&header).map_err(crate::table::err)?;
    for a in aggregates {
        for (ind, c) in &a.indicators {
            let mut rec = vec![
                a.institution_id.clone(),
                a.country.clone().unwrap_or_default(),
                a.subject.slug(),
                ind.name().to_string(),
                c.n.to_string(),
                c.y.to_string(),
                c.raw_sum.to_string(),
                c.low_threshold_papers.to_string(),
            ];
            for n in covariate_names {
                rec.push(a.covariates.get(n).map(|v| v.to_string()).unwrap_or_default());
                rec.push(a.standardized.get(n).map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&rec).map_err(crate::table::err)?;
        }
    }
    w.flush().map_err(|e| CoreError::Invalid(e.to_string()))
}

pub fn read_aggregates<R: Read>(src: R) -> Result<(Vec<InstitutionAggregate>, Vec<String>)> {
    let mut r = crate::table::reader(src);
    let headers = r.headers().map_err(crate::table::err)?.clone();
    let fixed = 8;
    if headers.len() < fixed || (headers.len() - fixed) % 2 != 0 {
        return Err(CoreError::Invalid("aggregate table has an unexpected header".into()));
    }
    let names: Vec<String> = headers.iter().skip(fixed).step_by(2).map(str::to_string).collect();
    let mut grouped: BTreeMap<(Subject, String), InstitutionAggregate> = BTreeMap::new();
    let bad = |what: &str, v: &str| CoreError::Invalid(format!("aggregate table: bad {what} {v:?}"));
    for rec in r.records() {
        let rec = rec.map_err(crate::table::err)?;
        let f = |i: usize| rec.get(i).unwrap_or_default();
        let subject: Subject = f(2).parse().map_err(|_| bad("subject", f(2)))?;
        let indicator: Indicator = f(3).parse().map_err(|_| bad("indicator", f(3)))?;
        let count = IndicatorCount {
            n: f(4).parse().map_err(|_| bad("n", f(4)))?,
            y: f(5).parse().map_err(|_| bad("y", f(5)))?,
            raw_sum: f(6).parse().map_err(|_| bad("raw_sum", f(6)))?,
            low_threshold_papers: f(7).parse().map_err(|_| bad("low_threshold_papers", f(7)))?,
        };
        let a = grouped
            .entry((subject, f(0).to_string()))
            .or_insert_with(|| InstitutionAggregate {
                institution_id: f(0).to_string(),
                subject,
                country: (!f(1).is_empty()).then(|| f(1).to_string()),
                indicators: BTreeMap::new(),
                covariates: BTreeMap::new(),
                standardized: BTreeMap::new(),
            });
        a.indicators.insert(indicator, count);
        for (j, n) in names.iter().enumerate() {
            if let Some(v) = parse_f64(f(fixed + 2 * j), n)? {
                a.covariates.insert(n.clone(), v);
            }
            if let Some(v) = parse_f64(f(fixed + 2 * j + 1), n)? {
                a.standardized.insert(n.clone(), v);
            }
        }
    }
    Ok((grouped.into_values().collect(), names))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_fixtures() {
        assert_eq!(round_successes(4.0 / 3.0, 10), 1);
        assert_eq!(round_successes(2.5, 10), 3);
        assert_eq!(round_successes(0.0, 10), 0);
        assert_eq!(round_successes(0.1 + 0.1 + 0.1 + 0.1 + 0.1 + 2.0, 10), 3);
        assert_eq!(round_successes(7.6, 7), 7);
    }

    #[test]
    fn standardization_fixtures() {
        assert_eq!(standardize_covariate(&[1.0, 2.0, 3.0]).unwrap(), vec![-1.0, 0.0, 1.0]);
        assert!(standardize_covariate(&[4.0, 4.0]).is_err());
        assert!(standardize_covariate(&[4.0]).is_err());
        let z = standardize_covariate(&[3.0, 9.5, -2.0, 0.25]).unwrap();
        let again = standardize_covariate(&z).unwrap();
        for (a, b) in z.iter().zip(&again) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn geo_and_covariates_round_trip() {
        let geo: GeoTable = [(
            "i1".to_string(),
            GeoEntry {
                name: "Inst, One".into(),
                country: "DE".into(),
                lat: Some(52.5),
                lon: None,
            },
        )]
        .into_iter()
        .collect();
        let mut buf = Vec::new();
        write_geo(&geo, &mut buf).unwrap();
        assert_eq!(read_geo(&buf[..]).unwrap(), geo);

        let covs: CovariateTable = [("DE".to_string(), [("GNI".to_string(), 1.5)].into_iter().collect())]
            .into_iter()
            .collect();
        let mut buf = Vec::new();
        write_covariates(&covs, &["GNI", "CPI"], &mut buf).unwrap();
        assert_eq!(read_covariates(&buf[..]).unwrap(), covs);
    }
}
