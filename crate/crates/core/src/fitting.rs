//! Per-subject model runs: one seven-indicator fit without covariate, one
//! per covariate, and the intercept model over the reader indicators.
//! Results are cached on disk by design and configuration hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use exmap_glmm::report::explained_variance;
use exmap_glmm::stats::RSquared;
use exmap_glmm::{fit, intercept_model, ClusterInput, FitConfig, FitResult, InterceptModel, StackedDesign};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::InstitutionAggregate;
use crate::error::{CoreError, Result};
use crate::sector::Indicator;
use crate::subject::Subject;

/// Indices of the six reader indicators, the basis of the intercept model.
pub const READER_INDICATORS: [usize; 6] = [0, 1, 2, 3, 4, 5];

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FitJob {
    pub subject: Subject,
    pub covariate: Option<String>,
}

impl FitJob {
    pub fn covariate_slug(&self) -> String {
        self.covariate.as_deref().map_or_else(|| "none".into(), str::to_lowercase)
    }
}

/// Every (subject, covariate) model: the plain model plus one per
/// covariate, per subject.
pub fn plan_fits(subjects: &[Subject], covariates: &[String]) -> Vec<FitJob> {
    let mut jobs = Vec::with_capacity(subjects.len() * (covariates.len() + 1));
    for &subject in subjects {
        jobs.push(FitJob { subject, covariate: None });
        for c in covariates {
            jobs.push(FitJob {
                subject,
                covariate: Some(c.clone()),
            });
        }
    }
    jobs
}

/// The stacked design of one subject. Institutions lacking the covariate
/// are left out, with a diagnostic.
pub fn build_design(aggregates: &[InstitutionAggregate], covariate: Option<&str>) -> Result<(StackedDesign, Vec<String>)> {
    let mut rows: Vec<&InstitutionAggregate> = aggregates.iter().collect();
    rows.sort_by(|a, b| a.institution_id.cmp(&b.institution_id));
    let mut diagnostics = Vec::new();
    let mut clusters = Vec::with_capacity(rows.len());
    for a in rows {
        let x = match covariate {
            None => None,
            Some(name) => match a.standardized.get(name) {
                Some(&x) => Some(x),
                None => {
                    diagnostics.push(format!("{}: no {name} value, left out", a.institution_id));
                    continue;
                }
            },
        };
        clusters.push(ClusterInput {
            id: a.institution_id.clone(),
            covariate: x,
            outcomes: Indicator::ALL
                .iter()
                .map(|i| a.indicators.get(i).map(|c| (c.y, c.n)))
                .collect(),
        });
    }
    let names = Indicator::ALL.iter().map(|i| i.name().to_string()).collect();
    let design = StackedDesign::build(names, clusters, covariate.map(str::to_string))?;
    diagnostics.extend(design.diagnostics().iter().cloned());
    Ok((design, diagnostics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FitStatus {
    Converged { fit: Box<FitResult> },
    Failed { error: String },
}

/// Everything the export stage needs from one (subject, covariate) model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub job: FitJob,
    pub design_hash: Option<String>,
    pub result: FitStatus,
    /// Share of each indicator's institution variance explained by the
    /// covariate, when both fits converged.
    #[serde(default)]
    pub r_squared: Option<Vec<Option<RSquared>>>,
    pub cache_hit: bool,
    pub diagnostics: Vec<String>,
}

impl FitOutcome {
    pub fn fit(&self) -> Option<&FitResult> {
        match &self.result {
            FitStatus::Converged { fit } => Some(fit),
            FitStatus::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterceptOutcome {
    pub subject: Subject,
    pub design_hash: Option<String>,
    pub model: Option<InterceptModel>,
    pub error: Option<String>,
    pub cache_hit: bool,
}

/// On-disk cache of converged fits keyed by design and configuration.
#[derive(Debug, Clone)]
pub struct FitCache {
    dir: PathBuf,
}

fn config_hash(config: &FitConfig, kind: &str) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update(serde_json::to_vec(config).expect("config serializes"));
    hex::encode(h.finalize())[..16].to_string()
}

impl FitCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, design_hash: &str, config: &FitConfig, kind: &str) -> PathBuf {
        self.dir.join(format!("{design_hash}-{}.json", config_hash(config, kind)))
    }

    fn load<T: for<'de> Deserialize<'de>>(&self, design_hash: &str, config: &FitConfig, kind: &str) -> Option<T> {
        let text = std::fs::read_to_string(self.path(design_hash, config, kind)).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn store<T: Serialize>(&self, design_hash: &str, config: &FitConfig, kind: &str, value: &T) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| CoreError::io(&self.dir, e))?;
        let path = self.path(design_hash, config, kind);
        let text = serde_json::to_string(value).expect("fit serializes");
        std::fs::write(&path, text).map_err(|e| CoreError::io(&path, e))
    }
}

fn cached_fit(design: &StackedDesign, config: &FitConfig, cache: Option<&FitCache>) -> Result<(FitResult, bool)> {
    let hash = design.content_hash();
    if let Some(hit) = cache.and_then(|c| c.load::<FitResult>(&hash, config, "fit")) {
        return Ok((hit, true));
    }
    let result = fit(design, config)?;
    if let Some(c) = cache {
        c.store(&hash, config, "fit", &result)?;
    }
    Ok((result, false))
}

/// Fit one job. Estimation failures are recorded in the outcome rather
/// than returned, so one subject cannot stop a run.
pub fn run_job(
    job: &FitJob,
    aggregates: &[InstitutionAggregate],
    config: &FitConfig,
    cache: Option<&FitCache>,
) -> Result<FitOutcome> {
    let failed = |error: String, design_hash: Option<String>, diagnostics: Vec<String>| FitOutcome {
        job: job.clone(),
        design_hash,
        result: FitStatus::Failed { error },
        r_squared: None,
        cache_hit: false,
        diagnostics,
    };
    let (design, diagnostics) = match build_design(aggregates, job.covariate.as_deref()) {
        Ok(d) => d,
        Err(e) => return Ok(failed(e.to_string(), None, Vec::new())),
    };
    let hash = design.content_hash();
    match cached_fit(&design, config, cache) {
        Ok((result, cache_hit)) => Ok(FitOutcome {
            job: job.clone(),
            design_hash: Some(hash),
            result: FitStatus::Converged { fit: Box::new(result) },
            r_squared: None,
            cache_hit,
            diagnostics,
        }),
        Err(CoreError::Io { path, source }) => Err(CoreError::Io { path, source }),
        Err(e) => Ok(failed(e.to_string(), Some(hash), diagnostics)),
    }
}

/// Fill in R² of each covariate outcome against the plain fit of the same
/// subject. The plain fit is refitted on the covariate model's
/// institutions when those differ, so both variances describe the same
/// set.
pub fn attach_r_squared(
    outcomes: &mut [FitOutcome],
    aggregates: &BTreeMap<Subject, Vec<InstitutionAggregate>>,
    config: &FitConfig,
    cache: Option<&FitCache>,
) -> Result<()> {
    let plain: BTreeMap<Subject, FitResult> = outcomes
        .iter()
        .filter(|o| o.job.covariate.is_none())
        .filter_map(|o| o.fit().map(|f| (o.job.subject, f.clone())))
        .collect();
    for o in outcomes.iter_mut().filter(|o| o.job.covariate.is_some()) {
        let (Some(with), Some(base)) = (o.fit(), plain.get(&o.job.subject)) else { continue };
        let base = if base.num_clusters == with.num_clusters {
            base.clone()
        } else {
            let members: std::collections::BTreeSet<&str> = with.eb.iter().map(|e| e.cluster.as_str()).collect();
            let rows: Vec<InstitutionAggregate> = aggregates[&o.job.subject]
                .iter()
                .filter(|a| members.contains(a.institution_id.as_str()))
                .cloned()
                .collect();
            let (design, _) = build_design(&rows, None)?;
            match cached_fit(&design, config, cache) {
                Ok((f, _)) => f,
                Err(e) => {
                    o.diagnostics.push(format!("R² baseline refit failed: {e}"));
                    continue;
                }
            }
        };
        match explained_variance(&base, with) {
            Ok(r2) => {
                for (k, r) in r2.iter().enumerate() {
                    if r.is_some_and(|r| r.clamped) {
                        o.diagnostics.push(format!(
                            "R² for {} was negative and is reported as 0",
                            Indicator::ALL[k]
                        ));
                    }
                }
                o.r_squared = Some(r2);
            }
            Err(e) => o.diagnostics.push(format!("R² not computed: {e}")),
        }
    }
    Ok(())
}

/// Intercept model over the six reader indicators of one subject.
pub fn run_intercept(
    subject: Subject,
    aggregates: &[InstitutionAggregate],
    config: &FitConfig,
    cache: Option<&FitCache>,
) -> Result<InterceptOutcome> {
    let mut out = InterceptOutcome {
        subject,
        design_hash: None,
        model: None,
        error: None,
        cache_hit: false,
    };
    let design = match build_design(aggregates, None).and_then(|(d, _)| Ok(d.select_indicators(&READER_INDICATORS)?)) {
        Ok(d) => d,
        Err(e) => {
            out.error = Some(e.to_string());
            return Ok(out);
        }
    };
    let hash = design.content_hash();
    out.design_hash = Some(hash.clone());
    if let Some(hit) = cache.and_then(|c| c.load::<InterceptModel>(&hash, config, "intercept")) {
        out.model = Some(hit);
        out.cache_hit = true;
        return Ok(out);
    }
    match intercept_model(&design, config) {
        Ok(m) => {
            if let Some(c) = cache {
                c.store(&hash, config, "intercept", &m)?;
            }
            out.model = Some(m);
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    Ok(out)
}

/// File name of a job's outcome inside the fits directory.
pub fn outcome_file(dir: &Path, job: &FitJob) -> PathBuf {
    dir.join(format!("{}.{}.json", job.subject.slug(), job.covariate_slug()))
}

pub fn intercept_file(dir: &Path, subject: Subject) -> PathBuf {
    dir.join(format!("{}.intercept.json", subject.slug()))
}
