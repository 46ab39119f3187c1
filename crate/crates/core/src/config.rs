//! Run configuration shared by every pipeline stage.

use std::path::{Path, PathBuf};

use exmap_glmm::FitConfig;
use serde::{Deserialize, Serialize};

use crate::aggregate::SelectionCriteria;
use crate::error::{CoreError, Result};
use crate::fetch::HttpConfig;
use crate::ingest::YearWindow;

/// Country covariates modelled by default, in report order.
pub const DEFAULT_COVARIATES: [&str; 5] = ["NOI", "NOR", "GNI", "MEG", "CPI"];

fn default_covariates() -> Vec<String> {
    DEFAULT_COVARIATES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    pub corpus: PathBuf,
    #[serde(default)]
    pub covariates: Option<PathBuf>,
    #[serde(default)]
    pub geo: Option<PathBuf>,
    /// Canned catalogue answers; takes precedence over `fetch.http`.
    #[serde(default)]
    pub fetch_fixture: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FetchSettings {
    pub in_flight: usize,
    /// Live catalogue lookups; the token comes from the environment.
    pub http: Option<HttpConfig>,
}

impl Default for FetchSettings {
    fn default() -> Self {
        Self { in_flight: 8, http: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub inputs: Inputs,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub years: Option<YearWindow>,
    #[serde(default)]
    pub selection: SelectionCriteria,
    #[serde(default)]
    pub model: FitConfig,
    #[serde(default = "default_covariates")]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub fetch: FetchSettings,
    pub output: PathBuf,
}

impl RunConfig {
    pub fn new(corpus: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        Self {
            inputs: Inputs {
                corpus: corpus.into(),
                covariates: None,
                geo: None,
                fetch_fixture: None,
            },
            seed: 0,
            years: None,
            selection: SelectionCriteria::default(),
            model: FitConfig::default(),
            covariates: default_covariates(),
            fetch: FetchSettings::default(),
            output: output.into(),
        }
    }

    /// Make every relative path relative to `base` (the config file's
    /// directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.inputs.corpus);
        for p in [
            &mut self.inputs.covariates,
            &mut self.inputs.geo,
            &mut self.inputs.fetch_fixture,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.output);
    }

    /// Fail early, naming the first input that does not exist.
    pub fn check_inputs(&self) -> Result<()> {
        let named = [
            Some(&self.inputs.corpus),
            self.inputs.covariates.as_ref(),
            self.inputs.geo.as_ref(),
            self.inputs.fetch_fixture.as_ref(),
        ];
        for p in named.into_iter().flatten() {
            if !p.is_file() {
                return Err(CoreError::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
        }
        if let Some(y) = self.years {
            if y.first > y.last {
                return Err(CoreError::Invalid(format!("year window {}..{} is empty", y.first, y.last)));
            }
        }
        if self.model.nodes == 0 {
            return Err(CoreError::Invalid("model.nodes must be at least 1".into()));
        }
        Ok(())
    }

    pub fn ingest_dir(&self) -> PathBuf {
        self.output.join("ingest")
    }

    pub fn indicators_dir(&self) -> PathBuf {
        self.output.join("indicators")
    }

    pub fn aggregate_dir(&self) -> PathBuf {
        self.output.join("aggregate")
    }

    pub fn fits_dir(&self) -> PathBuf {
        self.output.join("fits")
    }

    pub fn bundles_dir(&self) -> PathBuf {
        self.output.join("bundles")
    }
}
