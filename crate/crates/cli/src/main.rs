use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod annotate;
mod pipeline;
mod tools;

#[derive(Parser)]
#[command(name = "stl", version, about = "Self-training for multimodal rationales")]
struct Cli {
    /// Log filter, e.g. `debug` or `stl_core=trace`. Overrides RUST_LOG.
    #[arg(long, global = true)]
    log: Option<String>,
    #[command(subcommand)]
    command: Command,
}

/// Where model replies come from.
#[derive(Args, Debug, Clone, Default)]
pub struct GatewayArgs {
    /// Base URL of a chat-completions server, or a `mock:` designator.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Append every live reply to this transcript.
    #[arg(long, value_name = "FILE", conflicts_with = "replay")]
    pub record: Option<PathBuf>,
    /// Answer only from this transcript; a missing entry is an error.
    #[arg(long, value_name = "FILE")]
    pub replay: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Start a run from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        gateway: GatewayArgs,
        /// Stop after this iteration is recorded.
        #[arg(long, value_name = "N")]
        stop_after: Option<u32>,
    },
    /// Continue an interrupted run.
    Resume {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        gateway: GatewayArgs,
        #[arg(long, value_name = "N")]
        stop_after: Option<u32>,
    },
    /// Evaluate one model on a split.
    Eval(pipeline::EvalArgs),
    /// Accuracy table from run manifests and eval reports, plus preference blocks.
    Report(pipeline::ReportArgs),
    /// Parse raw responses and print one JSON record per response.
    Parse(tools::ParseArgs),
    /// Check a dataset split and its images.
    Validate {
        split: PathBuf,
        /// Defaults to the split's directory.
        #[arg(long)]
        image_root: Option<PathBuf>,
    },
    /// Trainer that writes a derived model id without training anything.
    MockTrainer {
        trainset: PathBuf,
        base_model: String,
        output_model: PathBuf,
    },
    /// Build a blinded comparison pool from two evaluated methods.
    AnnotatePool(annotate::PoolArgs),
    /// Serve the annotation API and UI.
    AnnotateServe(annotate::ServeArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let env = env_logger::Env::default().default_filter_or("info");
    let mut logger = env_logger::Builder::from_env(env);
    if let Some(filter) = &cli.log {
        logger.parse_filters(filter);
    }
    logger.init();

    let result = match cli.command {
        Command::Run {
            config,
            gateway,
            stop_after,
        } => pipeline::run(&config, &gateway, stop_after),
        Command::Resume {
            manifest,
            gateway,
            stop_after,
        } => pipeline::resume(&manifest, &gateway, stop_after),
        Command::Eval(args) => pipeline::eval(&args),
        Command::Report(args) => pipeline::report(&args),
        Command::Parse(args) => tools::parse(&args),
        Command::Validate { split, image_root } => tools::validate(&split, image_root.as_deref()),
        Command::MockTrainer {
            trainset,
            base_model,
            output_model,
        } => tools::mock_trainer(&trainset, &base_model, &output_model),
        Command::AnnotatePool(args) => annotate::pool(&args),
        Command::AnnotateServe(args) => annotate::serve(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Many core errors already embed their source in the message.
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
