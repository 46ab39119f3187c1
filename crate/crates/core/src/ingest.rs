//! Corpus parsing, DOI clean-up and merging of reader counts into papers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fetch::{FetchOutcome, FetchStatus};
use crate::sector::{classify_status, Sector, StatusClass};
use crate::subject::valid_asjc;

/// How a paper's reader counts were obtained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Retrieval {
    /// Not merged yet.
    #[default]
    Pending,
    /// Counts supplied with the corpus line.
    Inline,
    Found { round: u8 },
    /// Known to the service with no readers at all.
    NoReaders { round: u8 },
    /// No usable counts; the paper gets random percentiles downstream.
    Unretrievable { reason: UnretrievableReason },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnretrievableReason {
    /// No DOI, or its DOI was shared with another paper.
    NoDoi,
    FetchFailed,
    NotFetched,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaperRecord {
    pub paper_id: String,
    #[serde(default)]
    pub doi: Option<String>,
    pub year: i32,
    pub asjc_codes: BTreeSet<u16>,
    pub institution_ids: BTreeSet<String>,
    pub citations: u64,
    pub sjr: f64,
    /// Raw status counts carried on the input line, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub readers: Option<BTreeMap<String, u64>>,
    #[serde(default)]
    pub reader_counts: BTreeMap<Sector, u64>,
    #[serde(default)]
    pub retrieval: Retrieval,
}

impl PaperRecord {
    pub fn is_unretrievable(&self) -> bool {
        matches!(self.retrieval, Retrieval::Unretrievable { .. })
    }

    pub fn readers_in(&self, sector: Sector) -> u64 {
        self.reader_counts.get(&sector).copied().unwrap_or(0)
    }
}

/// Lowercased, trimmed DOI without a resolver prefix. Empty input gives
/// `None`.
pub fn normalize_doi(raw: &str) -> Option<String> {
    let mut s = raw.trim().to_lowercase();
    for prefix in ["https://doi.org/", "http://doi.org/", "https://dx.doi.org/", "http://dx.doi.org/", "doi:"] {
        if let Some(rest) = s.strip_prefix(prefix) {
            s = rest.trim().to_string();
            break;
        }
    }
    (!s.is_empty()).then_some(s)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    /// 1-based line number in the source.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearWindow {
    pub first: i32,
    pub last: i32,
}

impl YearWindow {
    pub fn contains(&self, year: i32) -> bool {
        (self.first..=self.last).contains(&year)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Parsed {
    pub records: Vec<PaperRecord>,
    pub diagnostics: Vec<Diagnostic>,
}

// The line as written, with signed numbers so that out-of-range values get
// a precise diagnostic instead of a generic type error.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    paper_id: String,
    #[serde(default)]
    doi: Option<String>,
    year: i64,
    asjc_codes: Vec<i64>,
    institution_ids: Vec<String>,
    citations: i64,
    sjr: f64,
    #[serde(default)]
    readers: Option<BTreeMap<String, i64>>,
}

fn validate(line: Line, window: Option<YearWindow>) -> std::result::Result<PaperRecord, String> {
    let paper_id = line.paper_id.trim().to_string();
    if paper_id.is_empty() {
        return Err("empty paper_id".into());
    }
    let year = i32::try_from(line.year).map_err(|_| format!("year {} out of range", line.year))?;
    if let Some(w) = window {
        if !w.contains(year) {
            return Err(format!("year {year} outside {}-{}", w.first, w.last));
        }
    }
    if line.asjc_codes.is_empty() {
        return Err("no subject codes".into());
    }
    let mut asjc_codes = BTreeSet::new();
    for c in line.asjc_codes {
        match u16::try_from(c) {
            Ok(c) if valid_asjc(c) => {
                asjc_codes.insert(c);
            }
            _ => return Err(format!("invalid subject code {c}")),
        }
    }
    let institution_ids: BTreeSet<String> = line
        .institution_ids
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if institution_ids.is_empty() {
        return Err("no institutions".into());
    }
    if line.citations < 0 {
        return Err(format!("negative citation count {}", line.citations));
    }
    if !(line.sjr.is_finite() && line.sjr >= 0.0) {
        return Err(format!("invalid sjr {}", line.sjr));
    }
    let readers = match line.readers {
        None => None,
        Some(raw) => {
            let mut out = BTreeMap::new();
            for (status, n) in raw {
                if n < 0 {
                    return Err(format!("negative reader count for {status:?}"));
                }
                *out.entry(status).or_insert(0) += n as u64;
            }
            Some(out)
        }
    };
    Ok(PaperRecord {
        paper_id,
        doi: line.doi.as_deref().and_then(normalize_doi),
        year,
        asjc_codes,
        institution_ids,
        citations: line.citations as u64,
        sjr: line.sjr,
        readers,
        reader_counts: BTreeMap::new(),
        retrieval: Retrieval::Pending,
    })
}

/// Parse a line-delimited corpus. Blank lines are skipped; malformed lines
/// and repeated paper ids become diagnostics. Only I/O failure is fatal.
pub fn parse_paper_records<R: BufRead>(source: R, window: Option<YearWindow>) -> std::io::Result<Parsed> {
    let mut out = Parsed::default();
    let mut seen = HashMap::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let number = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Line>(&line)
            .map_err(|e| e.to_string())
            .and_then(|l| validate(l, window));
        match parsed {
            Ok(r) => {
                if let Some(first) = seen.insert(r.paper_id.clone(), number) {
                    out.diagnostics.push(Diagnostic {
                        line: number,
                        message: format!("paper {} already defined on line {first}", r.paper_id),
                    });
                    seen.insert(r.paper_id.clone(), first);
                } else {
                    out.records.push(r);
                }
            }
            Err(message) => out.diagnostics.push(Diagnostic { line: number, message }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateDoi {
    pub doi: String,
    pub paper_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DuplicateReport {
    pub entries: Vec<DuplicateDoi>,
    /// Records that carried a DOI before clean-up.
    pub records_with_doi: usize,
    /// Records whose DOI was shared and has been removed.
    pub duplicated_records: usize,
}

impl DuplicateReport {
    /// Number of DOIs left to query.
    pub fn fetch_set_size(&self) -> usize {
        self.records_with_doi - self.duplicated_records
    }

    /// Tab-separated `doi, paper_ids, count`, with `;` between ids.
    pub fn write_tsv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = crate::table::writer(out);
        w.write_record(["doi", "paper_ids", "count"]).map_err(crate::table::err)?;
        for e in &self.entries {
            w.write_record([e.doi.as_str(), &e.paper_ids.join(";"), &e.paper_ids.len().to_string()])
                .map_err(crate::table::err)?;
        }
        w.flush().map_err(|e| crate::error::CoreError::Invalid(e.to_string()))?;
        Ok(())
    }
}

/// Remove every DOI that more than one record carries. The records stay in
/// the corpus, DOI-less, so they later receive random percentiles.
pub fn dedupe_dois(mut records: Vec<PaperRecord>) -> (Vec<PaperRecord>, DuplicateReport) {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if let Some(d) = &r.doi {
            groups.entry(d.clone()).or_default().push(i);
        }
    }
    let mut report = DuplicateReport {
        records_with_doi: groups.values().map(Vec::len).sum(),
        ..DuplicateReport::default()
    };
    for (doi, idx) in groups {
        if idx.len() < 2 {
            continue;
        }
        let mut paper_ids: Vec<String> = idx.iter().map(|&i| records[i].paper_id.clone()).collect();
        paper_ids.sort();
        for &i in &idx {
            records[i].doi = None;
        }
        report.duplicated_records += idx.len();
        report.entries.push(DuplicateDoi { doi, paper_ids });
    }
    (records, report)
}

/// DOIs that still need a lookup: present, and without inline counts.
pub fn fetch_targets(records: &[PaperRecord]) -> Vec<String> {
    let set: BTreeSet<&String> = records
        .iter()
        .filter(|r| r.readers.is_none())
        .filter_map(|r| r.doi.as_ref())
        .collect();
    set.into_iter().cloned().collect()
}

/// Fold raw status counts into sectors. Every sector is present in the
/// result; `Total` is the sum over all statuses. Unknown statuses are
/// returned for reporting.
pub fn sector_counts(raw: &BTreeMap<String, u64>) -> (BTreeMap<Sector, u64>, Vec<String>) {
    let mut counts: BTreeMap<Sector, u64> = Sector::ALL.iter().map(|&s| (s, 0)).collect();
    let mut unknown = Vec::new();
    for (status, &n) in raw {
        match classify_status(status) {
            StatusClass::Sector(s) => *counts.get_mut(&s).expect("all sectors present") += n,
            StatusClass::TotalOnly => {}
            StatusClass::Unknown => unknown.push(status.clone()),
        }
        *counts.get_mut(&Sector::Total).expect("total present") += n;
    }
    (counts, unknown)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MergeSummary {
    pub found: usize,
    pub no_readers: usize,
    pub inline: usize,
    pub unretrievable_no_doi: usize,
    pub unretrievable_failed: usize,
    pub unretrievable_not_fetched: usize,
    /// Unknown status strings with the number of readers they carried.
    pub unknown_statuses: BTreeMap<String, u64>,
}

/// Attach reader counts to every record. Papers without a DOI, or whose
/// lookup failed in both rounds, are flagged unretrievable.
pub fn merge_reader_data(
    records: Vec<PaperRecord>,
    outcomes: &BTreeMap<String, FetchOutcome>,
) -> (Vec<PaperRecord>, MergeSummary) {
    let mut summary = MergeSummary::default();
    let mut fill = |r: &mut PaperRecord, raw: &BTreeMap<String, u64>| {
        let (counts, unknown) = sector_counts(raw);
        for u in unknown {
            *summary.unknown_statuses.entry(u.clone()).or_insert(0) += raw[&u];
        }
        r.reader_counts = counts;
    };
    let mut out = Vec::with_capacity(records.len());
    for mut r in records {
        r.reader_counts.clear();
        let inline = r.readers.take();
        r.retrieval = match (&r.doi, inline) {
            (None, _) => Retrieval::Unretrievable {
                reason: UnretrievableReason::NoDoi,
            },
            (Some(_), Some(raw)) => {
                fill(&mut r, &raw);
                Retrieval::Inline
            }
            (Some(doi), None) => match outcomes.get(doi) {
                None => Retrieval::Unretrievable {
                    reason: UnretrievableReason::NotFetched,
                },
                Some(o) => match o.status {
                    FetchStatus::Found => {
                        fill(&mut r, &o.per_status_counts);
                        Retrieval::Found { round: o.round }
                    }
                    FetchStatus::NoReader => {
                        fill(&mut r, &BTreeMap::new());
                        Retrieval::NoReaders { round: o.round }
                    }
                    FetchStatus::Error => Retrieval::Unretrievable {
                        reason: UnretrievableReason::FetchFailed,
                    },
                },
            },
        };
        match &r.retrieval {
            Retrieval::Inline => summary.inline += 1,
            Retrieval::Found { .. } => summary.found += 1,
            Retrieval::NoReaders { .. } => summary.no_readers += 1,
            Retrieval::Unretrievable { reason } => match reason {
                UnretrievableReason::NoDoi => summary.unretrievable_no_doi += 1,
                UnretrievableReason::FetchFailed => summary.unretrievable_failed += 1,
                UnretrievableReason::NotFetched => summary.unretrievable_not_fetched += 1,
            },
            Retrieval::Pending => unreachable!("every branch assigns a state"),
        }
        out.push(r);
    }
    (out, summary)
}

pub fn write_records<W: Write>(records: &[PaperRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Read records written by [`write_records`]; any malformed line is fatal
/// here since the file is a stage output, not user input.
pub fn read_records<R: BufRead>(source: R) -> std::result::Result<Vec<PaperRecord>, String> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?);
    }
    Ok(out)
}
