//! Synthetic corpus for trying the pipeline end to end: papers with
//! subject codes, institutions, citations and reader counts, plus a fetch
//! fixture, country covariates and an institution geography table.
//!
//! Institutions carry a latent quality, partly inherited from their
//! country, that raises both citations and readers, so the models find
//! real between-institution variance and the country covariates explain
//! some of it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Gamma, LogNormal, Normal, Poisson};
use serde::Serialize;

use crate::aggregate::{write_covariates, write_geo, CovariateTable, GeoEntry, GeoTable, SelectionCriteria};
use crate::config::{RunConfig, DEFAULT_COVARIATES};
use crate::error::{CoreError, Result};
use crate::fetch::{FetchStatus, FixtureEntry};
use crate::ingest::YearWindow;

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSpec {
    pub papers: usize,
    pub institutions: usize,
    pub countries: usize,
    /// Subject areas (multiples of 100).
    pub areas: Vec<u16>,
    pub years: YearWindow,
    pub seed: u64,
}

impl Default for DemoSpec {
    fn default() -> Self {
        Self {
            papers: 50_000,
            institutions: 120,
            countries: 20,
            areas: vec![1100, 1300, 1700, 2200, 2700, 3100],
            years: YearWindow { first: 2012, last: 2016 },
            seed: 20_170_101,
        }
    }
}

impl DemoSpec {
    /// Selection thresholds scaled to the demo's size.
    pub fn selection(&self) -> SelectionCriteria {
        SelectionCriteria {
            min_papers: 50,
            min_institutions: 20,
            min_subjects: 3,
        }
    }
}

#[derive(Serialize)]
struct CorpusLine<'a> {
    paper_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    doi: Option<String>,
    year: i32,
    asjc_codes: Vec<u16>,
    institution_ids: Vec<&'a str>,
    citations: u64,
    sjr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    readers: Option<BTreeMap<&'static str, u64>>,
}

struct Institution {
    id: String,
    quality: f64,
    areas: WeightedIndex<f64>,
}

// Share of readers per status; librarians are rare, as in practice.
const STATUS_SHARES: [(&str, f64); 11] = [
    ("Student > Ph. D. Student", 0.22),
    ("Student > Master", 0.14),
    ("Student > Bachelor", 0.08),
    ("Student > Doctoral Student", 0.04),
    ("Researcher", 0.20),
    ("Professor", 0.06),
    ("Professor > Associate Professor", 0.06),
    ("Lecturer", 0.04),
    ("Lecturer > Senior Lecturer", 0.02),
    ("Librarian", 0.01),
    ("Other", 0.13),
];

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Write the demo inputs under `dir` and return a run configuration that
/// points at them, with output in `dir/out`.
pub fn generate(spec: &DemoSpec, dir: &Path) -> Result<RunConfig> {
    if spec.areas.is_empty() || spec.institutions == 0 || spec.countries == 0 {
        return Err(CoreError::Invalid("demo needs areas, institutions and countries".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::<f64>::new(0.0, 1.0).expect("valid normal");

    let country_effect: Vec<f64> = (0..spec.countries).map(|_| 0.3 * std_normal.sample(&mut rng)).collect();
    let mut covariates = CovariateTable::new();
    for (c, &eff) in country_effect.iter().enumerate() {
        let mut values = BTreeMap::new();
        let noisy = |rng: &mut ChaCha8Rng, scale: f64| eff / 0.3 + scale * std_normal.sample(rng);
        values.insert("NOI".into(), round3(40.0 + 12.0 * noisy(&mut rng, 0.8)));
        values.insert("NOR".into(), round3(3000.0 + 900.0 * noisy(&mut rng, 0.7)));
        values.insert("GNI".into(), round3(30_000.0 + 12_000.0 * noisy(&mut rng, 0.4)));
        values.insert("MEG".into(), round3(1.0 + 0.4 * noisy(&mut rng, 1.0)));
        // One country reports no corruption index.
        if c + 1 < spec.countries {
            values.insert("CPI".into(), round3(60.0 + 15.0 * noisy(&mut rng, 0.6)));
        }
        covariates.insert(country_code(c), values);
    }

    let size_dist = LogNormal::new(0.0, 0.8).expect("valid lognormal");
    let mut institutions = Vec::with_capacity(spec.institutions);
    let mut sizes = Vec::with_capacity(spec.institutions);
    let mut geo = GeoTable::new();
    for j in 0..spec.institutions {
        let country = rng.random_range(0..spec.countries);
        let id = format!("I{:03}", j + 1);
        let affinity: Vec<f64> = spec.areas.iter().map(|_| (0.8 * std_normal.sample(&mut rng)).exp()).collect();
        institutions.push(Institution {
            id: id.clone(),
            quality: country_effect[country] + 0.35 * std_normal.sample(&mut rng),
            areas: WeightedIndex::new(&affinity).expect("positive weights"),
        });
        sizes.push(size_dist.sample(&mut rng));
        // The last institution has no geography row.
        if j + 1 < spec.institutions {
            let (lat0, lon0) = country_centre(country);
            geo.insert(
                id,
                GeoEntry {
                    name: format!("Demo Institute {:03}", j + 1),
                    country: country_code(country),
                    lat: Some(round3(lat0 + rng.random_range(-3.0..3.0))),
                    lon: Some(round3(lon0 + rng.random_range(-3.0..3.0))),
                },
            );
        }
    }
    let pick_inst = WeightedIndex::new(&sizes).expect("positive sizes");
    let co_authors = WeightedIndex::new([0.5, 0.35, 0.15]).expect("positive weights");
    let shares = WeightedIndex::new(STATUS_SHARES.iter().map(|s| s.1)).expect("positive weights");
    let noise = Gamma::new(2.0, 0.5).expect("valid gamma");

    let corpus_path = dir.join("corpus.jsonl");
    let mut corpus = std::io::BufWriter::new(std::fs::File::create(&corpus_path).map_err(|e| CoreError::io(&corpus_path, e))?);
    let mut fixture: BTreeMap<String, FixtureEntry> = BTreeMap::new();
    let mut dois: Vec<String> = Vec::new();
    let years = spec.years.first..=spec.years.last;

    for i in 0..spec.papers {
        let paper_id = format!("P{:06}", i + 1);
        let year = rng.random_range(years.clone());
        let first = pick_inst.sample(&mut rng);
        let mut members = vec![first];
        for _ in 0..co_authors.sample(&mut rng) {
            let j = pick_inst.sample(&mut rng);
            if !members.contains(&j) {
                members.push(j);
            }
        }
        let area = spec.areas[institutions[first].areas.sample(&mut rng)];
        let mut asjc_codes = vec![area + rng.random_range(1..=5)];
        if rng.random_bool(0.2) {
            asjc_codes.push(area + rng.random_range(1..=5));
        }
        if rng.random_bool(0.12) {
            let other = *spec.areas.choose(&mut rng).expect("non-empty");
            asjc_codes.push(other + rng.random_range(1..=5));
        }
        asjc_codes.sort_unstable();
        asjc_codes.dedup();

        let quality = members.iter().map(|&j| institutions[j].quality).sum::<f64>() / members.len() as f64;
        let z = quality + 0.8 * std_normal.sample(&mut rng);
        let age = f64::from(spec.years.last - year);
        let citation_mean = (1.2 + 0.25 * age + 0.6 * z).exp() * noise.sample(&mut rng);
        let citations = poisson(&mut rng, citation_mean);
        let sjr = round3(LogNormal::new(0.3 * z, 0.5).expect("valid lognormal").sample(&mut rng));
        let reader_mean = (2.3 + 0.5 * z).exp() * noise.sample(&mut rng);
        let reader_total = poisson(&mut rng, reader_mean);
        let mut readers: BTreeMap<&'static str, u64> = BTreeMap::new();
        for _ in 0..reader_total {
            *readers.entry(STATUS_SHARES[shares.sample(&mut rng)].0).or_insert(0) += 1;
        }

        // Most papers have a DOI; a few share one with an earlier paper.
        let doi = if rng.random_bool(0.04) {
            None
        } else if !dois.is_empty() && rng.random_bool(0.003) {
            Some(dois[rng.random_range(0..dois.len())].clone())
        } else {
            let d = format!("10.5555/demo.{}", i + 1);
            dois.push(d.clone());
            Some(d)
        };
        let inline = doi.is_none() || rng.random_bool(0.6);
        if let (Some(d), false) = (&doi, inline) {
            let roll: f64 = rng.random();
            let entry = FixtureEntry {
                status: if roll < 0.01 {
                    FetchStatus::Error
                } else if readers.is_empty() {
                    FetchStatus::NoReader
                } else {
                    FetchStatus::Found
                },
                counts: readers.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                errors_before_success: u32::from((0.01..0.06).contains(&roll)),
            };
            fixture.entry(d.clone()).or_insert(entry);
        }
        let line = CorpusLine {
            paper_id,
            doi,
            year,
            asjc_codes,
            institution_ids: members.iter().map(|&j| institutions[j].id.as_str()).collect(),
            citations,
            sjr,
            readers: inline.then_some(readers),
        };
        serde_json::to_writer(&mut corpus, &line).map_err(|e| CoreError::io(&corpus_path, e.into()))?;
        corpus.write_all(b"\n").map_err(|e| CoreError::io(&corpus_path, e))?;
    }
    corpus.flush().map_err(|e| CoreError::io(&corpus_path, e))?;

    let fixture_path = dir.join("fetch_fixture.json");
    let mut text = serde_json::to_vec_pretty(&fixture).expect("fixture serializes");
    text.push(b'\n');
    std::fs::write(&fixture_path, text).map_err(|e| CoreError::io(&fixture_path, e))?;

    let cov_path = dir.join("covariates.tsv");
    let file = std::fs::File::create(&cov_path).map_err(|e| CoreError::io(&cov_path, e))?;
    write_covariates(&covariates, &DEFAULT_COVARIATES, file)?;
    let geo_path = dir.join("geo.tsv");
    let file = std::fs::File::create(&geo_path).map_err(|e| CoreError::io(&geo_path, e))?;
    write_geo(&geo, file)?;

    let mut config = RunConfig::new(corpus_path, dir.join("out"));
    config.inputs.covariates = Some(cov_path);
    config.inputs.geo = Some(geo_path);
    config.inputs.fetch_fixture = Some(fixture_path);
    config.seed = spec.seed;
    config.years = Some(spec.years);
    config.selection = spec.selection();
    Ok(config)
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u64
}

fn country_code(c: usize) -> String {
    format!("C{:02}", c + 1)
}

// Spread countries over a coarse grid of plausible coordinates.
fn country_centre(c: usize) -> (f64, f64) {
    let lat = -30.0 + 15.0 * (c % 6) as f64;
    let lon = -120.0 + 40.0 * (c / 6) as f64;
    (lat, lon)
}

