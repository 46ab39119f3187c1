use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use exmap_core::export::sha256_hex;

fn exmap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exmap"))
        .args(args)
        .env_remove("EXMAP_FETCH_TOKEN")
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

// A small synthetic corpus with a config loose enough that several
// subjects survive selection, and three-node quadrature for speed.
fn small_demo(dir: &Path, papers: usize) -> PathBuf {
    let out = exmap(&[
        "demo",
        "--output",
        arg(dir),
        "--papers",
        &papers.to_string(),
        "--institutions",
        "40",
        "--seed",
        "17",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let path = dir.join("config.toml");
    let text = std::fs::read_to_string(&path)
        .unwrap()
        .replace("min_papers = 50", "min_papers = 30")
        .replace("min_institutions = 20", "min_institutions = 10")
        .replace("min_subjects = 3", "min_subjects = 2")
        .replace("nodes = 7", "nodes = 3");
    std::fs::write(&path, text).unwrap();
    path
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn hundred_line_corpus_keeps_every_record() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_demo(dir.path(), 100);
    let out = exmap(&["ingest", "--config", arg(&config)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let corpus = std::fs::read_to_string(dir.path().join("out/ingest/corpus.jsonl")).unwrap();
    assert_eq!(corpus.lines().count(), 100);
    let summary = json(&dir.path().join("out/ingest/summary.json"));
    assert_eq!(summary["records"], 100);
    assert_eq!(summary["diagnostics"].as_array().unwrap().len(), 0);
}

#[test]
fn corrupt_lines_are_reported_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_demo(dir.path(), 100);
    let corpus = dir.path().join("corpus.jsonl");
    let mut text = std::fs::read_to_string(&corpus).unwrap();
    text.push_str("{\"paper_id\": \"broken\",\n");
    std::fs::write(&corpus, text).unwrap();
    let out = exmap(&["ingest", "--config", arg(&config)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = json(&dir.path().join("out/ingest/summary.json"));
    assert_eq!(summary["records"], 100);
    let diags = summary["diagnostics"].as_array().unwrap();
    assert_eq!(diags.len(), 1);
    assert_eq!(diags[0]["line"], 101);
}

#[test]
fn missing_inputs_exit_with_usage_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = exmap(&["all", "--config", arg(&dir.path().join("nope.toml"))]);
    assert_eq!(out.status.code(), Some(2));

    let config = small_demo(dir.path(), 100);
    std::fs::remove_file(dir.path().join("corpus.jsonl")).unwrap();
    let out = exmap(&["ingest", "--config", arg(&config)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus.jsonl"));

    std::fs::write(&config, "seed = 1\nunknown_key = 3\n").unwrap();
    let out = exmap(&["ingest", "--config", arg(&config)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_demo(dir.path(), 6000);
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    // Different worker counts must not change a byte.
    for (out_dir, jobs) in [(&first, "3"), (&second, "1")] {
        let out = exmap(&["all", "--config", arg(&config), "--output", arg(out_dir), "--jobs", jobs]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = files(&first.join("bundles"));
    assert!(a.len() > 1);
    assert_eq!(a, files(&second.join("bundles")));

    let manifest = json(&first.join("bundles/manifest.json"));
    let corpus = std::fs::read(dir.path().join("corpus.jsonl")).unwrap();
    assert_eq!(manifest["corpus_sha256"], sha256_hex(&corpus));
    assert_eq!(manifest["seed"], 17);
    for b in manifest["bundles"].as_array().unwrap() {
        let name = b["file"].as_str().unwrap();
        assert_eq!(b["sha256"], sha256_hex(&a[name]));
    }

    // A second export over the same fits reuses them and changes nothing.
    let out = exmap(&["fit", "--config", arg(&config), "--output", arg(&first)]);
    assert!(out.status.success());
    let line = String::from_utf8_lossy(&out.stdout).into_owned();
    let (converged, cached) = (line.split_whitespace().nth(1).unwrap(), line.split_whitespace().nth(6).unwrap());
    assert_eq!(converged, cached, "{line}");
    let out = exmap(&["export", "--config", arg(&config), "--output", arg(&first)]);
    assert!(out.status.success());
    assert_eq!(a, files(&first.join("bundles")));
}

#[test]
fn pseudo_likelihood_is_selectable() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_demo(dir.path(), 6000);
    for stage in ["ingest", "indicators", "aggregate", "fit"] {
        let out = exmap(&[stage, "--config", arg(&config), "--method", "pql"]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let fit = json(&dir.path().join("out/fits/all.none.json"));
    assert_eq!(fit["result"]["fit"]["method"]["kind"], "pseudo_likelihood");

    let out = exmap(&["fit", "--config", arg(&config), "--method", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
}
