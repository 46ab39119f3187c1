//! `exmap`: run the excellence mapping pipeline stage by stage or in one go.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use exmap_core::config::RunConfig;
use exmap_core::demo::{generate, DemoSpec};
use exmap_core::fetch::{FixtureFetcher, HttpFetcher, ReaderFetcher};
use exmap_core::pipeline;
use exmap_core::CoreError;
use exmap_glmm::Method;
use tracing_subscriber::EnvFilter;

const TOKEN_VAR: &str = "EXMAP_FETCH_TOKEN";

#[derive(Parser)]
#[command(name = "exmap", version, about = "Institution excellence maps from citations and reader counts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the corpus, drop shared DOIs and collect reader counts.
    Ingest(RunArgs),
    /// Top-10% weights per paper and the reader threshold tables.
    Indicators(RunArgs),
    /// Institution counts per subject and the selection rules.
    Aggregate(RunArgs),
    /// Multilevel models per subject, with and without each covariate.
    Fit(RunArgs),
    /// Ranking bundles and the run manifest.
    Export(RunArgs),
    /// Every stage in order.
    All(RunArgs),
    /// Write a synthetic corpus and a config that runs on it.
    Demo(DemoArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; relative paths inside it are taken
    /// relative to the file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for fetching, weighting and fitting.
    #[arg(long)]
    jobs: Option<usize>,
    /// Estimation method: auto, ml or pql.
    #[arg(long)]
    method: Option<Method>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DemoArgs {
    /// Directory to write the inputs and `config.toml` into.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = DemoSpec::default().papers)]
    papers: usize,
    #[arg(long, default_value_t = DemoSpec::default().institutions)]
    institutions: usize,
}

// Exit code for usage problems: missing or unreadable inputs and bad
// configuration.
const USAGE: u8 = 2;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<UsageError>().is_some()
                || e.downcast_ref::<CoreError>().is_some_and(CoreError::is_not_found);
            ExitCode::from(if usage { USAGE } else { 1 })
        }
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn load_config(args: &RunArgs) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| UsageError(format!("{}: {e}", args.config.display())))?;
    let mut config: RunConfig =
        toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", args.config.display())))?;
    let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
    config.resolve_paths(&base);
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(method) = args.method {
        config.model.method = method;
    }
    if let Some(out) = &args.output {
        config.output = out.clone();
    }
    config.check_inputs().map_err(|e| match e {
        CoreError::Io { .. } => anyhow::Error::new(e),
        other => anyhow::Error::new(UsageError(other.to_string())),
    })?;
    Ok(config)
}

fn set_jobs(jobs: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(UsageError("--jobs must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn fetcher(config: &RunConfig) -> anyhow::Result<Option<Box<dyn ReaderFetcher>>> {
    if let Some(path) = &config.inputs.fetch_fixture {
        return Ok(Some(Box::new(FixtureFetcher::load(path)?)));
    }
    if let Some(http) = &config.fetch.http {
        let token = std::env::var(TOKEN_VAR).ok();
        if token.is_none() {
            tracing::warn!("{TOKEN_VAR} is not set; requests go out unauthenticated");
        }
        return Ok(Some(Box::new(HttpFetcher::new(http.clone(), token))));
    }
    Ok(None)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (args, stage) = match cli.command {
        Command::Demo(d) => return demo(d),
        Command::Ingest(a) => (a, Stage::Ingest),
        Command::Indicators(a) => (a, Stage::Indicators),
        Command::Aggregate(a) => (a, Stage::Aggregate),
        Command::Fit(a) => (a, Stage::Fit),
        Command::Export(a) => (a, Stage::Export),
        Command::All(a) => (a, Stage::All),
    };
    let config = load_config(&args)?;
    set_jobs(args.jobs)?;
    if matches!(stage, Stage::Ingest | Stage::All) {
        let f = fetcher(&config)?;
        let s = pipeline::run_ingest(&config, f.as_deref())?;
        println!(
            "ingest: {} records, {} diagnostics, {} duplicated DOI records removed, {} unretrievable",
            s.records,
            s.diagnostics.len(),
            s.duplicated_records,
            s.merge.unretrievable_no_doi + s.merge.unretrievable_failed + s.merge.unretrievable_not_fetched
        );
    }
    if matches!(stage, Stage::Indicators | Stage::All) {
        let s = pipeline::run_indicators(&config)?;
        println!(
            "indicators: {} papers in {} buckets, {} sector cells below the reader threshold",
            s.papers, s.buckets, s.low_threshold_buckets
        );
    }
    if matches!(stage, Stage::Aggregate | Stage::All) {
        let s = pipeline::run_aggregate(&config)?;
        println!(
            "aggregate: {} institution-subject rows selected of {}, {} exclusions",
            s.rows_selected, s.rows_before_selection, s.exclusions
        );
    }
    if matches!(stage, Stage::Fit | Stage::All) {
        let s = pipeline::run_fit(&config)?;
        println!(
            "fit: {} of {} models converged, {} from cache",
            s.converged, s.scheduled, s.cache_hits
        );
        for f in s.fits.iter().filter(|f| !f.converged) {
            println!(
                "  {} / {}: {}",
                f.subject,
                f.covariate.as_deref().unwrap_or("none"),
                f.error.as_deref().unwrap_or("failed")
            );
        }
    }
    if matches!(stage, Stage::Export | Stage::All) {
        let m = pipeline::run_export(&config)?;
        println!(
            "export: {} bundles in {}, {} skipped",
            m.bundles.len(),
            config.bundles_dir().display(),
            m.skipped.len()
        );
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Stage {
    Ingest,
    Indicators,
    Aggregate,
    Fit,
    Export,
    All,
}

fn demo(args: DemoArgs) -> anyhow::Result<()> {
    let defaults = DemoSpec::default();
    let spec = DemoSpec {
        papers: args.papers,
        institutions: args.institutions,
        seed: args.seed.unwrap_or(defaults.seed),
        ..defaults
    };
    let mut config = generate(&spec, &args.output)?;
    // Keep the written config relocatable.
    let rel = |p: &Path| PathBuf::from(p.file_name().expect("demo files have names"));
    config.inputs.corpus = rel(&config.inputs.corpus);
    for p in [
        &mut config.inputs.covariates,
        &mut config.inputs.geo,
        &mut config.inputs.fetch_fixture,
    ]
    .into_iter()
    .flatten()
    {
        *p = rel(p);
    }
    config.output = PathBuf::from("out");
    let path = args.output.join("config.toml");
    let text = toml::to_string(&config).context("serializing the demo config")?;
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    println!("demo: {} papers written; run `exmap all --config {}`", spec.papers, path.display());
    Ok(())
}
