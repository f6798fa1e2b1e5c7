use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::Args;

use stl_core::annotation::PreferenceJudgment;
use stl_core::dataset::{load_dataset, DatasetFormat};
use stl_core::evaluation::{
    aggregate_preferences, evaluate_split, render_report, EvalMode, EvalReport, EvalSettings,
    ReportFormat, ReportRow,
};
use stl_core::gateway::{
    backend_for, with_transcript, Backend, Gateway, ImageResolver, ModelEndpoint, RetryPolicy,
    TranscriptMode,
};
use stl_core::orchestrator::{LoadedConfig, RunConfig, RunManifest, RunOptions, RunStatus, Runner};
use stl_core::rationale::ParseMode;

use crate::GatewayArgs;

fn transcript_mode(gw: &GatewayArgs) -> TranscriptMode {
    match (&gw.record, &gw.replay) {
        (Some(p), _) => TranscriptMode::Record(p.clone()),
        (_, Some(p)) => TranscriptMode::Replay(p.clone()),
        _ => TranscriptMode::Live,
    }
}

fn backend(endpoint: &ModelEndpoint, timeout_secs: u64, gw: &GatewayArgs) -> Result<Arc<dyn Backend>> {
    let live = backend_for(endpoint, Duration::from_secs(timeout_secs)).map_err(|e| anyhow!(e))?;
    let mode = transcript_mode(gw);
    with_transcript(live, &mode).with_context(|| format!("opening transcript for {mode:?}"))
}

fn apply_overrides(config: &mut RunConfig, gw: &GatewayArgs) -> Result<()> {
    if let Some(url) = &gw.endpoint {
        config.endpoint.base_url = url.clone();
    }
    if let Some(p) = gw.parallelism {
        config.parallelism = p;
    }
    config.validate().map_err(|e| anyhow!(e))
}

fn runner(loaded: LoadedConfig, gw: &GatewayArgs) -> Result<Runner> {
    let c = &loaded.config;
    let backend = backend(&c.endpoint, c.gateway.timeout_secs, gw)?;
    Ok(Runner::new(loaded, backend)?)
}

fn summarize(m: &RunManifest) {
    for it in m.iterations() {
        let model = it.produced_model_id.as_deref().unwrap_or("-");
        let avg = it.eval.as_ref().map_or("-".to_string(), |e| format!("{:.2}", e.macro_average));
        println!(
            "iteration {}: {} -> {}  trainset {}  macro {}",
            it.n, it.input_model_id, model, it.counts.trainset, avg
        );
    }
    match m.status() {
        RunStatus::Running => println!("status: stopped early, resume with --manifest {}", m.path().display()),
        RunStatus::Converged { reason } => println!("status: converged ({reason:?})"),
        RunStatus::Failed { iteration, reason } => println!("status: iteration {iteration} failed: {reason}"),
    }
}

pub fn run(config: &Path, gw: &GatewayArgs, stop_after: Option<u32>) -> Result<()> {
    let mut loaded = LoadedConfig::load(config).map_err(|e| anyhow!(e))?;
    apply_overrides(&mut loaded.config, gw)?;
    let m = runner(loaded, gw)?.start(RunOptions { halt_after: stop_after })?;
    summarize(&m);
    Ok(())
}

pub fn resume(manifest: &Path, gw: &GatewayArgs, stop_after: Option<u32>) -> Result<()> {
    let m = RunManifest::load(manifest)?;
    let header = m.header();
    let mut loaded = LoadedConfig::load(&header.config_path).map_err(|e| anyhow!(e))?;
    // Flags left out fall back to what the run was started with, so the
    // digest check only trips on real config changes.
    let gw = GatewayArgs {
        endpoint: gw.endpoint.clone().or_else(|| Some(header.config.endpoint.base_url.clone())),
        parallelism: gw.parallelism.or(Some(header.config.parallelism)),
        ..gw.clone()
    };
    apply_overrides(&mut loaded.config, &gw)?;
    let r = runner(loaded, &gw)?;
    let expected = r.manifest_path();
    if fs::canonicalize(manifest)? != fs::canonicalize(&expected).unwrap_or(expected.clone()) {
        bail!(
            "{} was moved; its config writes to {}",
            manifest.display(),
            expected.display()
        );
    }
    let m = r.resume(RunOptions { halt_after: stop_after })?;
    summarize(&m);
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    /// Model id sent to the endpoint.
    #[arg(long)]
    model: String,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, default_value = "positive_template")]
    mode: EvalMode,
    #[command(flatten)]
    gateway: GatewayArgs,
    /// Defaults to the split's directory.
    #[arg(long)]
    image_root: Option<PathBuf>,
    #[arg(long, default_value = "lenient")]
    parser: ParseMode,
    /// Environment variable holding the bearer token.
    #[arg(long, value_name = "VAR")]
    auth_env: Option<String>,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
    /// Write eval_report.json and eval_samples.jsonl here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "table")]
    format: ReportFormat,
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let url = a.gateway.endpoint.as_deref().context("--endpoint is required")?;
    let mut endpoint = ModelEndpoint::new(&a.model, url);
    endpoint.auth_ref = a.auth_env.clone();
    endpoint.validate().map_err(|e| anyhow!(e))?;
    let split = load_dataset(&a.split, DatasetFormat::Jsonl)?;
    let root = a.image_root.clone().unwrap_or_else(|| parent_dir(&a.split));
    let gateway = Gateway::new(
        backend(&endpoint, a.timeout_secs, &a.gateway)?,
        ImageResolver::new(root),
        RetryPolicy::default(),
    );
    let settings = EvalSettings {
        mode: a.mode,
        parallelism: a.gateway.parallelism.unwrap_or(4).max(1),
        parse_mode: a.parser,
    };
    let (report, outcomes) = evaluate_split(&gateway, &endpoint, &split, &settings)?;
    if let Some(miss) = outcomes.iter().find(|o| o.raw_text.starts_with("replay miss")) {
        bail!("{}: {}", miss.sample_id, miss.raw_text);
    }
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval_report.json"), serde_json::to_string_pretty(&report)?)?;
        let lines: String = outcomes
            .iter()
            .map(|o| serde_json::to_string(o).map(|s| s + "\n"))
            .collect::<Result<_, _>>()?;
        fs::write(dir.join("eval_samples.jsonl"), lines)?;
    }
    let failures = report.total_failures();
    if failures > 0 {
        log::warn!("{failures} responses could not be scored and count as wrong");
    }
    print!("{}", render_report(&[ReportRow::from_report(&a.model, &report)], &[], a.format));
    Ok(())
}

#[derive(Args)]
pub struct ReportArgs {
    /// Run manifest; one row per run (the last evaluated iteration).
    #[arg(long = "run", value_name = "MANIFEST")]
    runs: Vec<PathBuf>,
    /// Extra row from a standalone eval report, as LABEL=FILE.
    #[arg(long = "eval", value_name = "LABEL=FILE", value_parser = labelled)]
    evals: Vec<(String, PathBuf)>,
    /// One row per evaluated iteration instead of only the last.
    #[arg(long)]
    all_iterations: bool,
    /// Judgment log to summarize; needs --pool.
    #[arg(long, requires = "pool")]
    judgments: Option<PathBuf>,
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    annotators_per_sample: usize,
    #[arg(long, default_value = "table")]
    format: ReportFormat,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn labelled(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((label, path)) if !label.is_empty() && !path.is_empty() => Ok((label.to_string(), path.into())),
        _ => Err(format!("expected LABEL=FILE, got `{s}`")),
    }
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for path in &a.runs {
        let m = RunManifest::load(path)?;
        let variant = m.header().config.variant.as_str();
        let evaluated: Vec<_> = m.iterations().into_iter().filter(|it| it.eval.is_some()).collect();
        if evaluated.is_empty() {
            log::warn!("{} has no evaluated iteration", path.display());
        }
        let keep = if a.all_iterations { &evaluated[..] } else { &evaluated[evaluated.len().saturating_sub(1)..] };
        for it in keep {
            let e = it.eval.as_ref().expect("filtered on eval");
            rows.push(ReportRow {
                method: if a.all_iterations { format!("{variant} iter {}", it.n) } else { variant.to_string() },
                cells: e.per_domain.clone(),
                average: Some(e.macro_average),
            });
        }
    }
    for (label, path) in &a.evals {
        let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
        let r: EvalReport = serde_json::from_str(&text).with_context(|| path.display().to_string())?;
        rows.push(ReportRow::from_report(label, &r));
    }
    if rows.is_empty() && a.judgments.is_none() {
        bail!("nothing to report; pass --run, --eval or --judgments");
    }

    let mut prefs = Vec::new();
    if let (Some(jpath), Some(ppath)) = (&a.judgments, &a.pool) {
        let pool = stl_core::annotation::read_pool(ppath)?;
        let text = fs::read_to_string(jpath).with_context(|| jpath.display().to_string())?;
        let judgments = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str::<PreferenceJudgment>)
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| jpath.display().to_string())?;
        let [ma, mb] = &pool.methods;
        prefs.push(aggregate_preferences(&judgments, a.annotators_per_sample, ma, mb)?);
    }

    let text = render_report(&rows, &prefs, a.format);
    match &a.out {
        Some(p) => fs::write(p, text).with_context(|| p.display().to_string())?,
        None => print!("{text}"),
    }
    Ok(())
}
