use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Args;

use stl_annotation_server::{router, serve as serve_router, AppState};
use stl_core::annotation::{build_task_pool, read_pool, write_pool, AnnotationStore, MethodRun, PoolConfig};
use stl_core::dataset::{load_dataset, DatasetFormat};
use stl_core::evaluation::SampleOutcome;

use crate::pipeline::labelled;

#[derive(Args)]
pub struct PoolArgs {
    /// The split both methods were evaluated on.
    #[arg(long)]
    split: PathBuf,
    /// First method as NAME=eval_samples.jsonl.
    #[arg(long = "a", value_name = "NAME=FILE", value_parser = labelled)]
    method_a: (String, PathBuf),
    #[arg(long = "b", value_name = "NAME=FILE", value_parser = labelled)]
    method_b: (String, PathBuf),
    #[arg(long, default_value_t = 50)]
    per_domain: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also draw samples that either method got wrong.
    #[arg(long)]
    include_incorrect: bool,
    #[arg(long)]
    out: PathBuf,
}

fn method_run((name, path): &(String, PathBuf)) -> Result<MethodRun> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let outcomes = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str::<SampleOutcome>)
        .collect::<Result<Vec<_>, _>>()
        .with_context(|| path.display().to_string())?;
    Ok(MethodRun::from_outcomes(name, &outcomes))
}

pub fn pool(a: &PoolArgs) -> Result<()> {
    let split = load_dataset(&a.split, DatasetFormat::Jsonl)?;
    let cfg = PoolConfig {
        per_domain_quota: a.per_domain,
        seed: a.seed,
        require_both_correct: !a.include_incorrect,
    };
    let pool = build_task_pool(&split, &method_run(&a.method_a)?, &method_run(&a.method_b)?, cfg)?;
    write_pool(&pool, &a.out).with_context(|| a.out.display().to_string())?;
    println!("{} tasks written to {}", pool.tasks.len(), a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Comma-separated annotator ids allowed to submit.
    #[arg(long, value_delimiter = ',', required = true)]
    annotators: Vec<String>,
    /// Judgment log; defaults to judgments.jsonl next to the pool.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Directory image references are relative to; defaults to the pool's directory.
    #[arg(long)]
    image_root: Option<PathBuf>,
    /// Built UI bundle to serve at `/`.
    #[arg(long = "static", value_name = "DIR")]
    static_dir: Option<PathBuf>,
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let pool = read_pool(&a.pool)?;
    let dir = a.pool.parent().map(PathBuf::from).unwrap_or_default();
    let log = a.log.clone().unwrap_or_else(|| dir.join("judgments.jsonl"));
    let store = AnnotationStore::open(pool, a.annotators.iter().cloned(), &log)?;
    let state = Arc::new(AppState {
        store,
        image_root: a.image_root.clone().unwrap_or(dir),
    });
    let app = router(state, a.static_dir.as_deref());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(serve_router(app, SocketAddr::new(a.host, a.port)))?;
    Ok(())
}
