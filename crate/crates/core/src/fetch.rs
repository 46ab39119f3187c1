//! Reader-count acquisition. A [`ReaderFetcher`] answers one DOI per call;
//! [`fetch_reader_counts`] drives two rounds over a batch with bounded
//! parallelism, retrying each first-round failure exactly once.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FetchStatus {
    Found,
    NoReader,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchOutcome {
    pub doi: String,
    pub status: FetchStatus,
    /// Raw status string → readers; empty unless `status` is `Found`.
    pub per_status_counts: BTreeMap<String, u64>,
    /// Round that produced this outcome (1 or 2).
    pub round: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One lookup. `Ok` with an empty map means the DOI is known but has no
/// readers; `Err` is any transport or service failure.
pub trait ReaderFetcher: Sync {
    fn fetch(&self, doi: &str) -> std::result::Result<BTreeMap<String, u64>, String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FetchSummary {
    pub requested: usize,
    pub found_round1: usize,
    pub no_reader_round1: usize,
    pub errors_round1: usize,
    pub recovered_round2: usize,
    pub final_errors: usize,
}

impl FetchSummary {
    pub fn from_outcomes(outcomes: &BTreeMap<String, FetchOutcome>) -> Self {
        let mut s = FetchSummary {
            requested: outcomes.len(),
            ..Self::default()
        };
        for o in outcomes.values() {
            match (o.round, o.status) {
                (1, FetchStatus::Found) => s.found_round1 += 1,
                (1, FetchStatus::NoReader) => s.no_reader_round1 += 1,
                (2, FetchStatus::Found | FetchStatus::NoReader) => s.recovered_round2 += 1,
                (_, FetchStatus::Error) => s.final_errors += 1,
                _ => {}
            }
        }
        s.errors_round1 = s.recovered_round2 + s.final_errors;
        s
    }
}

fn outcome(doi: &str, round: u8, answer: std::result::Result<BTreeMap<String, u64>, String>) -> FetchOutcome {
    match answer {
        Ok(counts) => FetchOutcome {
            doi: doi.to_string(),
            status: if counts.values().any(|&n| n > 0) {
                FetchStatus::Found
            } else {
                FetchStatus::NoReader
            },
            per_status_counts: counts.into_iter().filter(|(_, n)| *n > 0).collect(),
            round,
            error: None,
        },
        Err(e) => FetchOutcome {
            doi: doi.to_string(),
            status: FetchStatus::Error,
            per_status_counts: BTreeMap::new(),
            round,
            error: Some(e),
        },
    }
}

fn run_round(dois: &[String], fetcher: &dyn ReaderFetcher, round: u8, in_flight: usize) -> Vec<FetchOutcome> {
    let go = || {
        dois.par_iter()
            .map(|d| outcome(d, round, fetcher.fetch(d)))
            .collect::<Vec<_>>()
    };
    match rayon::ThreadPoolBuilder::new().num_threads(in_flight.max(1)).build() {
        Ok(pool) => pool.install(go),
        Err(e) => {
            tracing::warn!("could not build fetch pool ({e}); fetching serially");
            dois.iter().map(|d| outcome(d, round, fetcher.fetch(d))).collect()
        }
    }
}

/// Look up every DOI once, then retry the failures once. The result is
/// keyed by DOI and does not depend on the order requests complete in.
pub fn fetch_reader_counts(
    dois: &[String],
    fetcher: &dyn ReaderFetcher,
    in_flight: usize,
) -> BTreeMap<String, FetchOutcome> {
    let mut unique = dois.to_vec();
    unique.sort();
    unique.dedup();
    let mut result: BTreeMap<String, FetchOutcome> = run_round(&unique, fetcher, 1, in_flight)
        .into_iter()
        .map(|o| (o.doi.clone(), o))
        .collect();
    let retry: Vec<String> = result
        .values()
        .filter(|o| o.status == FetchStatus::Error)
        .map(|o| o.doi.clone())
        .collect();
    tracing::info!(requested = unique.len(), retry = retry.len(), "first fetch round done");
    for o in run_round(&retry, fetcher, 2, in_flight) {
        result.insert(o.doi.clone(), o);
    }
    result
}

/// Answer for one DOI in a fixture file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub status: FetchStatus,
    #[serde(default)]
    pub counts: BTreeMap<String, u64>,
    /// Failed attempts before the entry's answer is served.
    #[serde(default)]
    pub errors_before_success: u32,
}

/// Serves answers from a `doi → entry` map and records every request.
/// Unknown DOIs fail.
#[derive(Debug, Default)]
pub struct FixtureFetcher {
    entries: BTreeMap<String, FixtureEntry>,
    attempts: Mutex<HashMap<String, u32>>,
}

impl FixtureFetcher {
    pub fn new(entries: BTreeMap<String, FixtureEntry>) -> Self {
        Self {
            entries,
            attempts: Mutex::new(HashMap::new()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let entries: BTreeMap<String, FixtureEntry> =
            serde_json::from_str(&text).map_err(|e| CoreError::format(path, e))?;
        Ok(Self::new(entries))
    }

    /// Requests made so far for `doi`.
    pub fn attempts(&self, doi: &str) -> u32 {
        self.attempts.lock().expect("attempt counter poisoned").get(doi).copied().unwrap_or(0)
    }

    pub fn total_attempts(&self) -> u32 {
        self.attempts.lock().expect("attempt counter poisoned").values().sum()
    }
}

impl ReaderFetcher for FixtureFetcher {
    fn fetch(&self, doi: &str) -> std::result::Result<BTreeMap<String, u64>, String> {
        let attempt = {
            let mut a = self.attempts.lock().expect("attempt counter poisoned");
            let n = a.entry(doi.to_string()).or_insert(0);
            *n += 1;
            *n
        };
        let entry = self.entries.get(doi).ok_or_else(|| format!("{doi}: not in fixture"))?;
        if attempt <= entry.errors_before_success {
            return Err(format!("{doi}: transient failure {attempt}"));
        }
        match entry.status {
            FetchStatus::Error => Err(format!("{doi}: service error")),
            FetchStatus::NoReader => Ok(BTreeMap::new()),
            FetchStatus::Found => Ok(entry.counts.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Endpoint queried as `{base_url}?doi=<doi>`.
    pub base_url: String,
    /// Most requests started per second across all workers; 0 disables
    /// the limit.
    pub requests_per_second: f64,
    pub timeout_secs: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.mendeley.com/catalog".into(),
            requests_per_second: 10.0,
            timeout_secs: 30,
        }
    }
}

/// Catalogue lookup over HTTP. The response is a JSON array of documents;
/// the first one's `reader_count_by_academic_status` is used. An empty
/// array is a failure (unknown DOI), a document without the map has no
/// readers.
pub struct HttpFetcher {
    agent: ureq::Agent,
    config: HttpConfig,
    token: Option<String>,
    next_slot: Mutex<Instant>,
}

#[derive(Deserialize)]
struct CatalogDocument {
    #[serde(default)]
    reader_count_by_academic_status: Option<BTreeMap<String, u64>>,
}

impl HttpFetcher {
    pub fn new(config: HttpConfig, token: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            config,
            token,
            next_slot: Mutex::new(Instant::now()),
        }
    }

    fn wait_for_slot(&self) {
        if self.config.requests_per_second <= 0.0 {
            return;
        }
        let gap = Duration::from_secs_f64(1.0 / self.config.requests_per_second);
        let start = {
            let mut next = self.next_slot.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let start = (*next).max(now);
            *next = start + gap;
            start
        };
        let now = Instant::now();
        if start > now {
            std::thread::sleep(start - now);
        }
    }
}

impl ReaderFetcher for HttpFetcher {
    fn fetch(&self, doi: &str) -> std::result::Result<BTreeMap<String, u64>, String> {
        self.wait_for_slot();
        let mut req = self
            .agent
            .get(&self.config.base_url)
            .query("doi", doi)
            .query("view", "stats")
            .header("Accept", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = req.call().map_err(|e| format!("{doi}: {e}"))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| format!("{doi}: {e}"))?;
        if status != 200 {
            return Err(format!("{doi}: HTTP {status}"));
        }
        let docs: Vec<CatalogDocument> = serde_json::from_str(&body).map_err(|e| format!("{doi}: bad body: {e}"))?;
        let first = docs.into_iter().next().ok_or_else(|| format!("{doi}: not in catalogue"))?;
        Ok(first.reader_count_by_academic_status.unwrap_or_default())
    }
}
