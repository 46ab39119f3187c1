//! Top-10% membership per paper, normalized within (year, subject code)
//! buckets: Hazen percentiles, fractional assignment of ties at the
//! threshold for reader counts, and a citation rule that breaks ties with
//! journal prestige.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::ingest::PaperRecord;
use crate::sector::{Indicator, Sector};

pub const TOP_SHARE: f64 = 0.10;

/// A selected share is reported when it misses the target by more than
/// this many percentage points.
pub const SHARE_TOLERANCE_PP: f64 = 1.0;

// Shares are handled in millionths so that `share * n` and the split of a
// straddling tie group are exact integers until one final division.
const SHARE_SCALE: u64 = 1_000_000;

// `share * n` in millionths.
fn target_mass(share: f64, n: usize) -> u64 {
    (share * SHARE_SCALE as f64).round() as u64 * n as u64
}

// Runs of equal values in `order` (indices sorted by value): (start, end).
fn tie_runs<T: PartialEq>(order: &[usize], values: &[T]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=order.len() {
        if i == order.len() || values[order[i]] != values[order[start]] {
            runs.push((start, i));
            start = i;
        }
    }
    runs
}

/// Hazen percentile `(i − 0.5)/n · 100` of every value, where `i` is the
/// ascending rank; tied values share the mean over their ranks. Output is
/// in input order.
pub fn hazen_percentiles(values: &[u64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(CoreError::Invalid("percentiles of an empty bucket".into()));
    }
    let n = values.len() as f64;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by_key(|&i| values[i]);
    let mut out = vec![0.0; values.len()];
    for (a, b) in tie_runs(&order, values) {
        // Mean of (i − 0.5) over ranks a+1..=b is (a + b)/2.
        let p = (a + b) as f64 / 2.0 / n * 100.0;
        for &i in &order[a..b] {
            out[i] = p;
        }
    }
    Ok(out)
}

/// Fractional membership of the top `share` of `values`. Values strictly
/// above the threshold group get 1; the group tied at the threshold shares
/// what is left of `share · n` equally. Weights sum to `share · n`.
pub fn fractional_top_share<T: Ord>(values: &[T], share: f64) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(CoreError::Invalid("top share of an empty bucket".into()));
    }
    if !(share > 0.0 && share < 1.0) {
        return Err(CoreError::Invalid(format!("share {share} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].cmp(&values[a]));
    let target = target_mass(share, values.len());
    let mut out = vec![0.0; values.len()];
    for (a, b) in tie_runs(&order, values) {
        let (above, size) = (a as u64 * SHARE_SCALE, (b - a) as u64 * SHARE_SCALE);
        if above >= target {
            break;
        }
        let w = if above + size <= target {
            1.0
        } else {
            (target - above) as f64 / size as f64
        };
        for &i in &order[a..b] {
            out[i] = w;
        }
    }
    Ok(out)
}

/// Binary top-10% by citations, ties broken by higher SJR. The first
/// `floor(0.1 n)` papers are selected; a group equal in both citations and
/// SJR that straddles the cut is selected whole.
pub fn citation_top10(values: &[(u64, f64)]) -> Vec<bool> {
    let n = values.len();
    let cut = (target_mass(TOP_SHARE, n) / SHARE_SCALE) as usize;
    let mut out = vec![false; n];
    if cut == 0 {
        return out;
    }
    let key = |i: usize| (values[i].0, values[i].1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (ca, sa) = key(a);
        let (cb, sb) = key(b);
        cb.cmp(&ca).then(sb.total_cmp(&sa))
    });
    let last = key(order[cut - 1]);
    for (pos, &i) in order.iter().enumerate() {
        if pos < cut || key(i) == last {
            out[i] = true;
        } else {
            break;
        }
    }
    out
}

/// Uniform draw on (0, 100) for one (paper, subject code), reproducible
/// from the run seed alone.
pub fn random_percentile(seed: u64, paper_id: &str, asjc: u16) -> f64 {
    let mut h = Sha256::new();
    h.update(b"exmap/random-percentile/v1");
    h.update(seed.to_le_bytes());
    h.update((paper_id.len() as u64).to_le_bytes());
    h.update(paper_id.as_bytes());
    h.update(asjc.to_le_bytes());
    let digest: [u8; 32] = h.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(digest);
    // 53 random bits, centred in their cell so that 0 and 1 never occur.
    let u = ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    100.0 * u
}

/// One draw per subject code of `paper`.
pub fn random_percentiles(seed: u64, paper: &PaperRecord) -> BTreeMap<u16, f64> {
    paper
        .asjc_codes
        .iter()
        .map(|&c| (c, random_percentile(seed, &paper.paper_id, c)))
        .collect()
}

/// Papers sharing a publication year and subject code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bucket {
    pub year: i32,
    pub asjc: u16,
    /// Indices into the record slice the bucket was built from.
    pub members: Vec<usize>,
}

/// Buckets ordered by (year, code); a paper with k codes is in k buckets.
pub fn build_buckets(records: &[PaperRecord]) -> Vec<Bucket> {
    let mut map: BTreeMap<(i32, u16), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        for &c in &r.asjc_codes {
            map.entry((r.year, c)).or_default().push(i);
        }
    }
    map.into_iter()
        .map(|((year, asjc), members)| Bucket { year, asjc, members })
        .collect()
}

/// Reader-sector weights within one bucket, in member order. Papers with
/// counts enter the fractional rule among themselves; unretrievable papers
/// count as top papers when their random percentile exceeds 90.
pub fn sector_bucket_weights(bucket: &Bucket, records: &[PaperRecord], sector: Sector, seed: u64) -> Vec<f64> {
    let mut out = vec![0.0; bucket.members.len()];
    let mut real_pos = Vec::new();
    let mut real_values = Vec::new();
    for (pos, &i) in bucket.members.iter().enumerate() {
        let r = &records[i];
        if r.is_unretrievable() {
            let p = random_percentile(seed, &r.paper_id, bucket.asjc);
            out[pos] = if p > 100.0 * (1.0 - TOP_SHARE) { 1.0 } else { 0.0 };
        } else {
            real_pos.push(pos);
            real_values.push(r.readers_in(sector));
        }
    }
    if !real_values.is_empty() {
        let w = fractional_top_share(&real_values, TOP_SHARE).expect("non-empty with valid share");
        for (pos, w) in real_pos.into_iter().zip(w) {
            out[pos] = w;
        }
    }
    out
}

/// Citation membership within one bucket, in member order, and the
/// selected share.
pub fn citation_bucket_weights(bucket: &Bucket, records: &[PaperRecord]) -> (Vec<f64>, f64) {
    let values: Vec<(u64, f64)> = bucket
        .members
        .iter()
        .map(|&i| (records[i].citations, records[i].sjr))
        .collect();
    let sel = citation_top10(&values);
    let share = sel.iter().filter(|&&s| s).count() as f64 / sel.len() as f64;
    (sel.into_iter().map(|s| if s { 1.0 } else { 0.0 }).collect(), share)
}

/// Membership of one paper on one indicator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorWeights {
    pub paper_id: String,
    pub indicator: Indicator,
    pub per_asjc: BTreeMap<u16, f64>,
    /// Best subject-code value, used for "All subject areas".
    pub all_subjects: f64,
}

fn collect_weights(
    records: &[PaperRecord],
    indicator: Indicator,
    per_bucket: Vec<(&Bucket, Vec<f64>)>,
) -> Vec<IndicatorWeights> {
    let mut per_paper: Vec<BTreeMap<u16, f64>> = vec![BTreeMap::new(); records.len()];
    for (bucket, w) in per_bucket {
        for (&i, w) in bucket.members.iter().zip(w) {
            per_paper[i].insert(bucket.asjc, w);
        }
    }
    records
        .iter()
        .zip(per_paper)
        .map(|(r, per_asjc)| IndicatorWeights {
            paper_id: r.paper_id.clone(),
            indicator,
            all_subjects: per_asjc.values().copied().fold(0.0, f64::max),
            per_asjc,
        })
        .collect()
}

/// Weights of every paper for one reader sector, in record order.
pub fn sector_weights(buckets: &[Bucket], records: &[PaperRecord], sector: Sector, seed: u64) -> Vec<IndicatorWeights> {
    let per_bucket = buckets
        .par_iter()
        .map(|b| (b, sector_bucket_weights(b, records, sector, seed)))
        .collect();
    collect_weights(records, Indicator::Readers(sector), per_bucket)
}

/// A bucket whose citation selection is off target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareDeviation {
    pub year: i32,
    pub asjc: u16,
    pub papers: usize,
    pub selected_share: f64,
}

/// Citation weights of every paper, plus the buckets whose selected share
/// differs from 10% by more than [`SHARE_TOLERANCE_PP`].
pub fn citation_weights(buckets: &[Bucket], records: &[PaperRecord]) -> (Vec<IndicatorWeights>, Vec<ShareDeviation>) {
    let results: Vec<(&Bucket, Vec<f64>, f64)> = buckets
        .par_iter()
        .map(|b| {
            let (w, share) = citation_bucket_weights(b, records);
            (b, w, share)
        })
        .collect();
    let deviations = results
        .iter()
        .filter(|(_, _, s)| (s - TOP_SHARE).abs() * 100.0 > SHARE_TOLERANCE_PP)
        .map(|(b, _, s)| ShareDeviation {
            year: b.year,
            asjc: b.asjc,
            papers: b.members.len(),
            selected_share: *s,
        })
        .collect();
    let per_bucket = results.into_iter().map(|(b, w, _)| (b, w)).collect();
    (collect_weights(records, Indicator::Citations, per_bucket), deviations)
}

/// All seven indicators, keyed by indicator, each in record order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightSet {
    pub by_indicator: BTreeMap<Indicator, Vec<IndicatorWeights>>,
    pub citation_deviations: Vec<ShareDeviation>,
}

pub fn compute_weights(records: &[PaperRecord], seed: u64) -> WeightSet {
    let buckets = build_buckets(records);
    let mut by_indicator: BTreeMap<Indicator, Vec<IndicatorWeights>> = Sector::ALL
        .par_iter()
        .map(|&s| (Indicator::Readers(s), sector_weights(&buckets, records, s, seed)))
        .collect();
    let (cites, citation_deviations) = citation_weights(&buckets, records);
    by_indicator.insert(Indicator::Citations, cites);
    WeightSet {
        by_indicator,
        citation_deviations,
    }
}

/// One line of the weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightLine {
    pub paper_id: String,
    pub indicator: Indicator,
    pub asjc: u16,
    pub weight: f64,
    pub all_subjects: f64,
}

impl WeightSet {
    /// Paper-major lines, indicators in model order, codes ascending.
    pub fn write_lines<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let n = self.by_indicator.values().next().map_or(0, Vec::len);
        for p in 0..n {
            for ind in Indicator::ALL {
                let Some(ws) = self.by_indicator.get(&ind) else { continue };
                let w = &ws[p];
                for (&asjc, &weight) in &w.per_asjc {
                    let line = WeightLine {
                        paper_id: w.paper_id.clone(),
                        indicator: ind,
                        asjc,
                        weight,
                        all_subjects: w.all_subjects,
                    };
                    serde_json::to_writer(&mut out, &line)?;
                    out.write_all(b"\n")?;
                }
            }
        }
        out.flush()
    }
}

/// Parse a weights file back into per-(paper, indicator) weights.
pub fn read_weight_lines<R: std::io::BufRead>(src: R) -> std::result::Result<Vec<IndicatorWeights>, String> {
    let mut map: BTreeMap<(String, Indicator), IndicatorWeights> = BTreeMap::new();
    for (i, line) in src.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        let l: WeightLine = serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?;
        let entry = map
            .entry((l.paper_id.clone(), l.indicator))
            .or_insert_with(|| IndicatorWeights {
                paper_id: l.paper_id.clone(),
                indicator: l.indicator,
                per_asjc: BTreeMap::new(),
                all_subjects: l.all_subjects,
            });
        entry.per_asjc.insert(l.asjc, l.weight);
    }
    Ok(map.into_values().collect())
}

/// Threshold and mean readers of one sector in one bucket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCell {
    /// Smallest count whose Hazen percentile reaches 90.
    pub threshold: u64,
    pub mean: f64,
    /// Threshold of 0 or 1: top and bottom papers are barely separable.
    pub low: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub year: i32,
    pub asjc: u16,
    pub papers: usize,
    /// Papers with reader counts, the basis of the cells.
    pub retrieved: usize,
    /// `None` when no paper in the bucket has counts.
    pub cells: BTreeMap<Sector, Option<ThresholdCell>>,
}

/// Sector columns in table order.
pub const REPORT_SECTORS: [Sector; 6] = [
    Sector::Librarians,
    Sector::Lecturers,
    Sector::Professors,
    Sector::Researchers,
    Sector::Students,
    Sector::Total,
];

fn threshold_cell(values: &[u64]) -> Option<ThresholdCell> {
    let pct = hazen_percentiles(values).ok()?;
    let threshold = values
        .iter()
        .zip(&pct)
        .filter(|(_, p)| **p >= 90.0 - 1e-9)
        .map(|(v, _)| *v)
        .min()
        .unwrap_or_else(|| *values.iter().max().expect("non-empty"));
    let mean = values.iter().sum::<u64>() as f64 / values.len() as f64;
    Some(ThresholdCell {
        threshold,
        mean,
        low: threshold <= 1,
    })
}

/// Per-bucket reader thresholds for the buckets of `year`, in code order.
pub fn threshold_report(buckets: &[Bucket], records: &[PaperRecord], year: i32) -> Vec<ThresholdRow> {
    buckets
        .iter()
        .filter(|b| b.year == year)
        .map(|b| {
            let real: Vec<&PaperRecord> = b
                .members
                .iter()
                .map(|&i| &records[i])
                .filter(|r| !r.is_unretrievable())
                .collect();
            let cells = REPORT_SECTORS
                .iter()
                .map(|&s| {
                    let v: Vec<u64> = real.iter().map(|r| r.readers_in(s)).collect();
                    (s, threshold_cell(&v))
                })
                .collect();
            ThresholdRow {
                year,
                asjc: b.asjc,
                papers: b.members.len(),
                retrieved: real.len(),
                cells,
            }
        })
        .collect()
}

/// Tab-separated table: code, then threshold and mean per sector, paper
/// count, and the sectors flagged for a low threshold.
pub fn write_threshold_report<W: Write>(rows: &[ThresholdRow], out: W) -> Result<()> {
    let mut w = crate::table::writer(out);
    let mut header = vec!["asjc".to_string()];
    for s in REPORT_SECTORS {
        header.push(format!("{s}_p90"));
        header.push(format!("{s}_mean"));
    }
    header.extend(["papers".into(), "retrieved".into(), "low_threshold".into()]);
    w.write_record(&header).map_err(crate::table::err)?;
    for r in rows {
        let mut rec = vec![r.asjc.to_string()];
        let mut low = Vec::new();
        for s in REPORT_SECTORS {
            match r.cells[&s] {
                Some(c) => {
                    rec.push(c.threshold.to_string());
                    rec.push(format!("{:.2}", c.mean));
                    if c.low {
                        low.push(s.name());
                    }
                }
                None => rec.extend(["".into(), "".into()]),
            }
        }
        rec.push(r.papers.to_string());
        rec.push(r.retrieved.to_string());
        rec.push(low.join(";"));
        w.write_record(&rec).map_err(crate::table::err)?;
    }
    w.flush().map_err(|e| CoreError::Invalid(e.to_string()))?;
    Ok(())
}

/// (year, code, sector) combinations with a low threshold, across all
/// report rows.
pub fn low_threshold_set(rows: &[ThresholdRow]) -> std::collections::BTreeSet<(i32, u16, Sector)> {
    rows.iter()
        .flat_map(|r| {
            r.cells
                .iter()
                .filter(|(_, c)| c.is_some_and(|c| c.low))
                .map(move |(&s, _)| (r.year, r.asjc, s))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-3)
    }

    #[test]
    fn hazen_fixtures() {
        assert_eq!(hazen_percentiles(&[7]).unwrap(), vec![50.0]);
        assert!(close(&hazen_percentiles(&[1, 2, 3]).unwrap(), &[16.667, 50.0, 83.333]));
        assert!(close(&hazen_percentiles(&[4, 4, 9]).unwrap(), &[33.333, 33.333, 83.333]));
        assert!(close(&hazen_percentiles(&[9, 4, 4]).unwrap(), &[83.333, 33.333, 33.333]));
        assert!(hazen_percentiles(&[]).is_err());
    }

    #[test]
    fn fractional_fixtures() {
        let w = fractional_top_share(&[9u64, 8, 7, 6, 5, 4, 3, 2, 1, 0], 0.1).unwrap();
        assert_eq!(w, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let w = fractional_top_share(&[5u64, 5, 5, 2, 2, 1, 1, 1, 0, 0], 0.1).unwrap();
        for x in &w[..3] {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(w[3..].iter().all(|&x| x == 0.0));
        assert_eq!(fractional_top_share(&[3u64; 10], 0.1).unwrap(), vec![0.1; 10]);
    }

    #[test]
    fn exact_integer_targets_are_not_split() {
        // 0.1 * 30 is not exactly 3 in floating point.
        let v: Vec<u64> = (0..30).collect();
        let w = fractional_top_share(&v, 0.1).unwrap();
        assert_eq!(w.iter().filter(|&&x| x == 1.0).count(), 3);
        assert_eq!(w.iter().filter(|&&x| x == 0.0).count(), 27);
    }

    #[test]
    fn share_must_be_a_proper_fraction() {
        assert!(fractional_top_share(&[1u64], 0.0).is_err());
        assert!(fractional_top_share(&[1u64], 1.0).is_err());
    }

    #[test]
    fn citation_fixtures() {
        let distinct: Vec<(u64, f64)> = (0..10).map(|c| (c, 1.0)).collect();
        let sel = citation_top10(&distinct);
        assert_eq!(sel.iter().filter(|&&s| s).count(), 1);
        assert!(sel[9]);

        let mut tied_top: Vec<(u64, f64)> = (0..8).map(|c| (c, 1.0)).collect();
        tied_top.push((50, 0.8));
        tied_top.push((50, 2.5));
        let sel = citation_top10(&tied_top);
        assert_eq!(sel.iter().filter(|&&s| s).count(), 1);
        assert!(sel[9] && !sel[8]);

        let mut boundary: Vec<(u64, f64)> = (0..7).map(|c| (c, 1.0)).collect();
        boundary.extend([(20, 1.5); 3]);
        let sel = citation_top10(&boundary);
        assert_eq!(sel.iter().filter(|&&s| s).count(), 3);
    }

    #[test]
    fn small_buckets_select_nothing() {
        assert!(citation_top10(&[(5, 1.0), (3, 1.0)]).iter().all(|s| !s));
    }

    #[test]
    fn random_percentiles_are_reproducible_and_independent() {
        let a = random_percentile(7, "p1", 1600);
        assert_eq!(a, random_percentile(7, "p1", 1600));
        assert_ne!(a, random_percentile(7, "p1", 1601));
        assert_ne!(a, random_percentile(8, "p1", 1600));
        assert!(a > 0.0 && a < 100.0);
    }

    #[test]
    fn random_percentiles_average_fifty() {
        let n = 100_000;
        let mean = (0..n).map(|i| random_percentile(3, &format!("p{i}"), 1100)).sum::<f64>() / n as f64;
        assert!((mean - 50.0).abs() < 1.0, "{mean}");
    }

    #[test]
    fn threshold_of_zeros_is_zero() {
        let c = threshold_cell(&[0; 20]).unwrap();
        assert_eq!((c.threshold, c.mean, c.low), (0, 0.0, true));
    }

    #[test]
    fn threshold_picks_first_value_at_ninetieth_percentile() {
        // Hazen percentiles of 1..=20 are 2.5, 7.5, ..., 97.5; 90 is first
        // reached at rank 19.
        let v: Vec<u64> = (1..=20).collect();
        let c = threshold_cell(&v).unwrap();
        assert_eq!(c.threshold, 19);
        assert!(!c.low);
        assert!((c.mean - 10.5).abs() < 1e-12);
    }
}
