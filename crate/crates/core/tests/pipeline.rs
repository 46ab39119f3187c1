use std::collections::BTreeMap;
use std::path::Path;

use exmap_core::aggregate::SelectionCriteria;
use exmap_core::config::RunConfig;
use exmap_core::demo::{generate, DemoSpec};
use exmap_core::export::ExportBundle;
use exmap_core::fetch::FixtureFetcher;
use exmap_core::fitting::plan_fits;
use exmap_core::pipeline::{run_aggregate, run_all, run_export, run_fit, run_indicators, run_ingest};
use exmap_core::Subject;
use exmap_glmm::Method;

fn small_demo(dir: &Path, seed: u64) -> RunConfig {
    let spec = DemoSpec {
        papers: 6000,
        institutions: 40,
        countries: 8,
        areas: vec![1300, 2700, 3100],
        seed,
        ..DemoSpec::default()
    };
    let mut config = generate(&spec, dir).unwrap();
    config.selection = SelectionCriteria {
        min_papers: 30,
        min_institutions: 10,
        min_subjects: 2,
    };
    config.model.nodes = 3;
    config
}

fn fixture(config: &RunConfig) -> FixtureFetcher {
    FixtureFetcher::load(config.inputs.fetch_fixture.as_ref().unwrap()).unwrap()
}

fn bundle_bytes(config: &RunConfig) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(config.bundles_dir())
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn demo_runs_end_to_end_and_reproduces() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = small_demo(a.path(), 9);
    let cb = small_demo(b.path(), 9);
    let manifest = run_all(&ca, Some(&fixture(&ca))).unwrap();
    run_all(&cb, Some(&fixture(&cb))).unwrap();

    // Three areas plus the roll-up, six models each, seven bundles per model.
    let subjects = manifest.bundles.iter().map(|m| m.subject).collect::<std::collections::BTreeSet<_>>();
    assert!(subjects.contains(&Subject::All));
    assert_eq!(manifest.bundles.len() + 7 * manifest.skipped.len(), subjects.len() * 6 * 7);
    assert_eq!(manifest.seed, 9);
    assert_eq!(manifest.corpus_sha256.len(), 64);

    let bytes_a = bundle_bytes(&ca);
    assert_eq!(bytes_a, bundle_bytes(&cb));
    for (name, bytes) in &bytes_a {
        if name != "manifest.json" {
            let bundle = ExportBundle::from_slice(bytes).unwrap();
            assert_eq!(&bundle.file_name(), name);
        }
    }
}

#[test]
fn stages_rerun_independently() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_demo(dir.path(), 3);
    let summary = run_ingest(&config, Some(&fixture(&config))).unwrap();
    assert_eq!(summary.records, 6000);
    assert!(summary.merge.unretrievable_no_doi > 0);
    assert!(summary.fetch.recovered_round2 > 0);
    run_indicators(&config).unwrap();
    let agg = run_aggregate(&config).unwrap();
    assert!(agg.rows_selected > 0);
    assert!(agg.diagnostics.iter().any(|d| d.contains("CPI")));

    // Export before fitting names what is missing.
    let err = run_export(&config).unwrap_err().to_string();
    assert!(err.contains("no fit for"), "{err}");

    let first = run_fit(&config).unwrap();
    assert_eq!(first.cache_hits, 0);
    let subjects = agg.per_subject.len();
    assert_eq!(first.scheduled, subjects * 6);
    let summary_path = config.fits_dir().join("summary.json");
    let before = std::fs::read(&summary_path).unwrap();
    let second = run_fit(&config).unwrap();
    assert_eq!(second.cache_hits, second.converged);
    assert_eq!(std::fs::read(&summary_path).unwrap(), before);
    run_export(&config).unwrap();
    let manifest_path = config.bundles_dir().join("manifest.json");
    let m1 = std::fs::read(&manifest_path).unwrap();
    run_export(&config).unwrap();
    assert_eq!(std::fs::read(&manifest_path).unwrap(), m1);
}

#[test]
fn pseudo_likelihood_can_be_forced() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_demo(dir.path(), 4);
    config.model.method = Method::Pql;
    config.covariates = vec!["GNI".into()];
    run_ingest(&config, Some(&fixture(&config))).unwrap();
    run_indicators(&config).unwrap();
    run_aggregate(&config).unwrap();
    let s = run_fit(&config).unwrap();
    assert!(s.converged > 0);
    let text = std::fs::read_to_string(config.fits_dir().join("all.none.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["result"]["fit"]["method"]["kind"], "pseudo_likelihood");
}

#[test]
fn full_plan_counts_every_model() {
    let mut subjects: Vec<Subject> = (11..=34).map(|c| Subject::Area(c * 100)).collect();
    subjects.push(Subject::All);
    let covs: Vec<String> = exmap_core::config::DEFAULT_COVARIATES.iter().map(|s| s.to_string()).collect();
    assert_eq!(plan_fits(&subjects, &covs).len(), 150);
}
