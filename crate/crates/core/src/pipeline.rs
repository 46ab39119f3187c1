//! The pipeline stages. Each stage reads only the files written by the
//! stages before it and writes plain files under the output directory, so
//! any stage can be rerun on its own.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use exmap_glmm::report::render;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    accumulate, attach_standardized, build_aggregates, read_aggregates, read_covariates, read_geo, select_institutions,
    write_aggregates, CovariateTable, Exclusion, GeoTable, InstitutionAggregate,
};
use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::export::{build_bundles, sha256_hex, write_bundles, BundleInputs, Manifest, SCHEMA_VERSION};
use crate::fetch::{fetch_reader_counts, FetchOutcome, FetchStatus, FetchSummary, ReaderFetcher};
use crate::indicators::{
    build_buckets, compute_weights, low_threshold_set, read_weight_lines, threshold_report, write_threshold_report,
    ShareDeviation,
};
use crate::ingest::{
    dedupe_dois, fetch_targets, merge_reader_data, parse_paper_records, read_records, write_records, Diagnostic,
    MergeSummary,
};
use crate::fitting::{
    attach_r_squared, intercept_file, outcome_file, plan_fits, run_intercept, run_job, FitCache, FitJob, FitOutcome,
    InterceptOutcome,
};
use crate::sector::Indicator;
use crate::subject::Subject;
use crate::table;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CoreError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CoreError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value).expect("summary serializes");
    text.push(b'\n');
    write_bytes(path, &text)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut out = create(path)?;
    out.write_all(bytes).and_then(|_| out.flush()).map_err(|e| CoreError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| CoreError::format(path, e))
}

fn finish<W: Write>(mut out: W, path: &Path) -> Result<()> {
    out.flush().map_err(|e| CoreError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub corpus_sha256: String,
    pub records: usize,
    pub diagnostics: Vec<Diagnostic>,
    pub records_with_doi: usize,
    pub duplicated_records: usize,
    pub duplicate_dois: usize,
    pub fetch_set: usize,
    pub fetch: FetchSummary,
    pub merge: MergeSummary,
}

/// Parse, drop shared DOIs, look up reader counts and write the cleaned
/// corpus. Without a fetcher, papers lacking inline counts are marked
/// unretrievable.
pub fn run_ingest(config: &RunConfig, fetcher: Option<&dyn ReaderFetcher>) -> Result<IngestSummary> {
    let path = &config.inputs.corpus;
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    let parsed = parse_paper_records(&bytes[..], config.years).map_err(|e| CoreError::io(path, e))?;
    for d in &parsed.diagnostics {
        tracing::warn!(line = d.line, "{}", d.message);
    }
    let (records, duplicates) = dedupe_dois(parsed.records);
    let outcomes = match fetcher {
        Some(f) => fetch_reader_counts(&fetch_targets(&records), f, config.fetch.in_flight.max(1)),
        None => BTreeMap::new(),
    };
    let (records, merge) = merge_reader_data(records, &outcomes);

    let dir = config.ingest_dir();
    let corpus = dir.join("corpus.jsonl");
    let mut out = create(&corpus)?;
    write_records(&records, &mut out).map_err(|e| CoreError::io(&corpus, e))?;
    finish(out, &corpus)?;
    let dup_path = dir.join("duplicates.tsv");
    let mut out = create(&dup_path)?;
    duplicates.write_tsv(&mut out)?;
    finish(out, &dup_path)?;
    write_fetch_table(&dir.join("fetch.tsv"), &outcomes)?;

    let summary = IngestSummary {
        corpus_sha256: sha256_hex(&bytes),
        records: records.len(),
        diagnostics: parsed.diagnostics,
        records_with_doi: duplicates.records_with_doi,
        duplicated_records: duplicates.duplicated_records,
        duplicate_dois: duplicates.entries.len(),
        fetch_set: duplicates.fetch_set_size(),
        fetch: FetchSummary::from_outcomes(&outcomes),
        merge,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn write_fetch_table(path: &Path, outcomes: &BTreeMap<String, FetchOutcome>) -> Result<()> {
    let mut w = table::writer(create(path)?);
    w.write_record(["doi", "status", "round", "readers", "error"]).map_err(table::err)?;
    for o in outcomes.values() {
        let status = match o.status {
            FetchStatus::Found => "found",
            FetchStatus::NoReader => "no_reader",
            FetchStatus::Error => "error",
        };
        let readers: u64 = o.per_status_counts.values().sum();
        w.write_record([
            o.doi.as_str(),
            status,
            &o.round.to_string(),
            &readers.to_string(),
            o.error.as_deref().unwrap_or(""),
        ])
        .map_err(table::err)?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

fn load_corpus(config: &RunConfig) -> Result<Vec<crate::ingest::PaperRecord>> {
    let path = config.ingest_dir().join("corpus.jsonl");
    read_records(open(&path)?).map_err(|m| CoreError::format(&path, m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSummary {
    pub seed: u64,
    pub papers: usize,
    pub buckets: usize,
    /// Sum of all-subject weights per indicator.
    pub weight_sums: BTreeMap<Indicator, f64>,
    pub low_threshold_buckets: usize,
    pub citation_share_deviations: Vec<ShareDeviation>,
}

/// Top-10% weights for all seven indicators and the per-year threshold
/// tables.
pub fn run_indicators(config: &RunConfig) -> Result<IndicatorSummary> {
    let records = load_corpus(config)?;
    let buckets = build_buckets(&records);
    if buckets.is_empty() {
        return Err(CoreError::Invalid("no (year, subject code) buckets to normalize".into()));
    }
    let weights = compute_weights(&records, config.seed);
    let dir = config.indicators_dir();
    let path = dir.join("weights.jsonl");
    let mut out = create(&path)?;
    weights.write_lines(&mut out).map_err(|e| CoreError::io(&path, e))?;
    finish(out, &path)?;

    let years: BTreeSet<i32> = buckets.iter().map(|b| b.year).collect();
    let mut low = 0;
    for year in years {
        let rows = threshold_report(&buckets, &records, year);
        low += low_threshold_set(&rows).len();
        let path = dir.join(format!("thresholds_{year}.tsv"));
        let mut out = create(&path)?;
        write_threshold_report(&rows, &mut out)?;
        finish(out, &path)?;
    }

    let summary = IndicatorSummary {
        seed: config.seed,
        papers: records.len(),
        buckets: buckets.len(),
        weight_sums: weights
            .by_indicator
            .iter()
            .map(|(i, w)| (*i, w.iter().map(|x| x.all_subjects).sum()))
            .collect(),
        low_threshold_buckets: low,
        citation_share_deviations: weights.citation_deviations,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub institutions: usize,
    pub rows_before_selection: usize,
    pub rows_selected: usize,
    /// Selected institutions per subject, by slug.
    pub per_subject: BTreeMap<String, usize>,
    pub exclusions: usize,
    pub covariates: Vec<String>,
    pub diagnostics: Vec<String>,
}

fn load_geo(config: &RunConfig) -> Result<GeoTable> {
    match &config.inputs.geo {
        Some(p) => read_geo(open(p)?).map_err(|e| relabel(e, p)),
        None => Ok(GeoTable::new()),
    }
}

fn load_covariates(config: &RunConfig) -> Result<CovariateTable> {
    match &config.inputs.covariates {
        Some(p) => read_covariates(open(p)?).map_err(|e| relabel(e, p)),
        None => Ok(CovariateTable::new()),
    }
}

fn relabel(e: CoreError, path: &Path) -> CoreError {
    match e {
        CoreError::Invalid(m) => CoreError::format(path, m),
        other => other,
    }
}

/// Institution counts per subject, the selection rules and covariate
/// standardization.
pub fn run_aggregate(config: &RunConfig) -> Result<AggregateSummary> {
    let records = load_corpus(config)?;
    let weights_path = config.indicators_dir().join("weights.jsonl");
    let weights = read_weight_lines(open(&weights_path)?).map_err(|m| CoreError::format(&weights_path, m))?;
    let buckets = build_buckets(&records);
    let years: BTreeSet<i32> = buckets.iter().map(|b| b.year).collect();
    let mut low = BTreeSet::new();
    for year in years {
        low.extend(low_threshold_set(&threshold_report(&buckets, &records, year)));
    }
    let geo = load_geo(config)?;
    let covariates = load_covariates(config)?;

    let acc = accumulate(&weights, &records, &low)?;
    let all = build_aggregates(&acc, &geo, &covariates)?;
    let (mut kept, exclusions) = select_institutions(&all, &config.selection);
    let mut diagnostics = Vec::new();
    for a in &kept {
        if a.country.is_none() {
            diagnostics.push(format!("{}: no country in the geography table", a.institution_id));
        }
    }
    diagnostics.sort();
    diagnostics.dedup();
    diagnostics.extend(attach_standardized(&mut kept, &config.covariates)?);

    let dir = config.aggregate_dir();
    let path = dir.join("aggregates.tsv");
    let mut out = create(&path)?;
    write_aggregates(&kept, &config.covariates, &mut out)?;
    finish(out, &path)?;
    write_exclusions(&dir.join("exclusions.tsv"), &exclusions)?;

    let mut per_subject = BTreeMap::new();
    for a in &kept {
        *per_subject.entry(a.subject.slug()).or_insert(0) += 1;
    }
    let summary = AggregateSummary {
        institutions: all.iter().map(|a| &a.institution_id).collect::<BTreeSet<_>>().len(),
        rows_before_selection: all.len(),
        rows_selected: kept.len(),
        per_subject,
        exclusions: exclusions.len(),
        covariates: config.covariates.clone(),
        diagnostics,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn write_exclusions(path: &Path, exclusions: &[Exclusion]) -> Result<()> {
    let mut w = table::writer(create(path)?);
    w.write_record(["institution_id", "subject", "reason", "value", "required"])
        .map_err(table::err)?;
    for e in exclusions {
        use crate::aggregate::ExclusionReason::*;
        let (reason, value, required) = match e.reason {
            TooFewPapers { papers, required } => ("too_few_papers", papers, required),
            SubjectTooSmall { institutions, required } => ("subject_too_small", institutions as u64, required as u64),
            TooFewSubjects { subjects, required } => ("too_few_subjects", subjects as u64, required as u64),
        };
        w.write_record([
            e.institution_id.as_str(),
            &e.subject.slug(),
            reason,
            &value.to_string(),
            &required.to_string(),
        ])
        .map_err(table::err)?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

fn load_aggregates(config: &RunConfig) -> Result<BTreeMap<Subject, Vec<InstitutionAggregate>>> {
    let path = config.aggregate_dir().join("aggregates.tsv");
    let (rows, _) = read_aggregates(open(&path)?).map_err(|e| relabel(e, &path))?;
    let mut by_subject: BTreeMap<Subject, Vec<InstitutionAggregate>> = BTreeMap::new();
    for a in rows {
        by_subject.entry(a.subject).or_default().push(a);
    }
    Ok(by_subject)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub subject: Subject,
    pub covariate: Option<String>,
    pub converged: bool,
    pub cache_hit: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub scheduled: usize,
    pub converged: usize,
    pub cache_hits: usize,
    pub fits: Vec<FitRecord>,
}

/// Every planned model, in parallel. A model that fails is recorded and
/// the run continues.
pub fn run_fit(config: &RunConfig) -> Result<FitSummary> {
    let aggregates = load_aggregates(config)?;
    let subjects: Vec<Subject> = aggregates.keys().copied().collect();
    let jobs = plan_fits(&subjects, &config.covariates);
    let dir = config.fits_dir();
    let cache = FitCache::new(dir.join("cache"));

    let mut outcomes: Vec<FitOutcome> = jobs
        .par_iter()
        .map(|job| {
            tracing::info!(subject = %job.subject, covariate = job.covariate_slug(), "fitting");
            run_job(job, &aggregates[&job.subject], &config.model, Some(&cache))
        })
        .collect::<Result<_>>()?;
    attach_r_squared(&mut outcomes, &aggregates, &config.model, Some(&cache))?;
    let intercepts: Vec<InterceptOutcome> = subjects
        .par_iter()
        .map(|&s| run_intercept(s, &aggregates[&s], &config.model, Some(&cache)))
        .collect::<Result<_>>()?;

    let plain: BTreeMap<Subject, &FitOutcome> = outcomes
        .iter()
        .filter(|o| o.job.covariate.is_none())
        .map(|o| (o.job.subject, o))
        .collect();
    let mut records = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        let path = outcome_file(&dir, &o.job);
        let mut stored = o.clone();
        stored.cache_hit = false;
        write_json(&path, &stored)?;
        if let Some(fit) = o.fit() {
            let base = if o.job.covariate.is_some() {
                plain.get(&o.job.subject).and_then(|p| p.fit())
            } else {
                None
            };
            let mut text = render(fit, base.filter(|b| b.num_clusters == fit.num_clusters)).unwrap_or_else(|e| e.to_string());
            if let Some(r2) = &o.r_squared {
                text.push_str(&format!("\nR² against the model without covariate: {}\n", format_r2(r2)));
            }
            write_bytes(&path.with_extension("txt"), text.as_bytes())?;
        }
        records.push(FitRecord {
            subject: o.job.subject,
            covariate: o.job.covariate.clone(),
            converged: o.fit().is_some(),
            cache_hit: o.cache_hit,
            error: match &o.result {
                crate::fitting::FitStatus::Failed { error } => Some(error.clone()),
                crate::fitting::FitStatus::Converged { .. } => None,
            },
        });
    }
    for i in &intercepts {
        let mut stored = i.clone();
        stored.cache_hit = false;
        write_json(&intercept_file(&dir, i.subject), &stored)?;
    }
    let summary = FitSummary {
        scheduled: jobs.len(),
        converged: records.iter().filter(|r| r.converged).count(),
        cache_hits: records.iter().filter(|r| r.cache_hit).count(),
        fits: records,
    };
    // Cache hits vary between runs; keep them out of the written summary.
    let written = FitSummary {
        cache_hits: 0,
        fits: summary
            .fits
            .iter()
            .map(|r| FitRecord { cache_hit: false, ..r.clone() })
            .collect(),
        ..summary.clone()
    };
    write_json(&dir.join("summary.json"), &written)?;
    Ok(summary)
}

fn format_r2(r2: &[Option<exmap_glmm::stats::RSquared>]) -> String {
    r2.iter()
        .zip(Indicator::ALL)
        .map(|(r, i)| match r {
            Some(r) => format!("{i} {:.2}", r.value),
            None => format!("{i} n/a"),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Build every bundle from the stored fits and write the manifest.
pub fn run_export(config: &RunConfig) -> Result<Manifest> {
    let aggregates = load_aggregates(config)?;
    let geo = load_geo(config)?;
    let ingest: IngestSummary = read_json(&config.ingest_dir().join("summary.json"))?;
    let dir = config.fits_dir();
    let subjects: Vec<Subject> = aggregates.keys().copied().collect();
    let jobs = plan_fits(&subjects, &config.covariates);

    let load_outcome = |job: &FitJob| -> Result<FitOutcome> {
        let path = outcome_file(&dir, job);
        if !path.is_file() {
            return Err(CoreError::Invalid(format!(
                "no fit for {} with covariate {}: expected {}",
                job.subject,
                job.covariate_slug(),
                path.display()
            )));
        }
        read_json(&path)
    };
    let outcomes: Vec<FitOutcome> = jobs.iter().map(load_outcome).collect::<Result<_>>()?;
    let mut intercepts = BTreeMap::new();
    for &s in &subjects {
        let path = intercept_file(&dir, s);
        let i: InterceptOutcome = if path.is_file() {
            read_json(&path)?
        } else {
            return Err(CoreError::Invalid(format!("no intercept model for {s}: expected {}", path.display())));
        };
        intercepts.insert(s, i);
    }
    let plain: BTreeMap<Subject, &FitOutcome> = outcomes
        .iter()
        .filter(|o| o.job.covariate.is_none())
        .map(|o| (o.job.subject, o))
        .collect();

    let mut skipped = Vec::new();
    let mut work = Vec::new();
    for o in &outcomes {
        let base = plain[&o.job.subject];
        match (base.fit(), o.fit()) {
            (Some(p), Some(f)) => work.push((o, p, f)),
            (None, _) => skipped.push(format!(
                "{} / {}: model without covariate did not converge",
                o.job.subject,
                o.job.covariate_slug()
            )),
            (_, None) => skipped.push(format!("{} / {}: model did not converge", o.job.subject, o.job.covariate_slug())),
        }
    }
    let bundles: Vec<_> = work
        .par_iter()
        .map(|(o, p, f)| {
            build_bundles(&BundleInputs {
                subject: o.job.subject,
                plain: p,
                adjusted: o.job.covariate.as_ref().map(|_| *f),
                intercept: intercepts[&o.job.subject].model.as_ref(),
                aggregates: &aggregates[&o.job.subject],
                geo: &geo,
            })
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let listed = write_bundles(&config.bundles_dir(), &bundles)?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        seed: config.seed,
        corpus_sha256: ingest.corpus_sha256,
        config: manifest_config(config),
        bundles: listed,
        skipped,
    };
    write_bytes(&config.bundles_dir().join("manifest.json"), &manifest.to_bytes())?;
    Ok(manifest)
}

// The configuration as recorded in the manifest: paths reduced to file
// names, so the manifest does not depend on where the run lives.
fn manifest_config(config: &RunConfig) -> serde_json::Value {
    let mut c = config.clone();
    let name = |p: &PathBuf| PathBuf::from(p.file_name().unwrap_or_default());
    c.inputs.corpus = name(&c.inputs.corpus);
    for p in [&mut c.inputs.covariates, &mut c.inputs.geo, &mut c.inputs.fetch_fixture]
        .into_iter()
        .flatten()
    {
        *p = name(p);
    }
    c.output = PathBuf::new();
    serde_json::to_value(&c).expect("config serializes")
}

/// Every stage in order.
pub fn run_all(config: &RunConfig, fetcher: Option<&dyn ReaderFetcher>) -> Result<Manifest> {
    run_ingest(config, fetcher)?;
    run_indicators(config)?;
    run_aggregate(config)?;
    run_fit(config)?;
    run_export(config)
}
