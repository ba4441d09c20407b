mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use zsfuse_core::attribution::{
    DEFAULT_GROWTH, DEFAULT_KERNEL, DEFAULT_MAX_KERNEL, DEFAULT_MIN_WIDTH, DEFAULT_START_WIDTH,
    DEFAULT_STRIDE, DEFAULT_THRESHOLD,
};
use zsfuse_core::classifier::DEFAULT_DESCRIPTION_COUNT;

use config::{FileConfig, GlobalArgs, InferenceArgs, RunConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "zsfuse",
    version,
    about = "Zero-shot image classification from fused image and LLM text features"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Labels,
    Template,
    Descriptions,
    Combined,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a classifier model from class labels
    Build(BuildArgs),
    /// Classify one image
    Classify(ClassifyArgs),
    /// Evaluate a model or a text-matching baseline on a dataset manifest
    Evaluate(EvaluateArgs),
    /// Occlusion attribution heatmap and word importances for one image
    Attribute(AttributeArgs),
    /// Inspect or manage the response cache
    #[command(subcommand)]
    Cache(CacheCommand),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// One label per line
    #[arg(
        long,
        conflicts_with = "manifest",
        required_unless_present = "manifest"
    )]
    pub labels: Option<PathBuf>,
    /// Take labels (and template override) from a dataset manifest
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Combined)]
    pub mode: ModeArg,
    /// Generated descriptions per class
    #[arg(long, default_value_t = DEFAULT_DESCRIPTION_COUNT)]
    pub k: usize,
    /// Label template containing {class_label}
    #[arg(long)]
    pub template: Option<String>,
    /// Dataset tag selecting a built-in template (pets, dtd, cars)
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    pub image: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub inference: InferenceArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Required unless --baseline is given
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Match raw LLM output to labels instead of fusing features: rouge1, rougeL or embed
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long)]
    pub max_failure_fraction: Option<f64>,
    /// Directory for report.json and report.csv
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub inference: InferenceArgs,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    pub image: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Heatmap PNG; the attribution map is written next to it as .json
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_KERNEL)]
    pub kernel: u32,
    #[arg(long, default_value_t = DEFAULT_STRIDE)]
    pub stride: u32,
    #[arg(long, default_value_t = DEFAULT_GROWTH)]
    pub growth: u32,
    #[arg(long, default_value_t = DEFAULT_MAX_KERNEL)]
    pub max_kernel: u32,
    #[arg(long, default_value_t = DEFAULT_START_WIDTH)]
    pub text_width: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_WIDTH)]
    pub min_text_width: usize,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[command(flatten)]
    pub inference: InferenceArgs,
}

#[derive(Debug, Subcommand)]
pub enum CacheCommand {
    /// Entry counts and sizes per backend identity
    Stats,
    /// Re-digest every entry and report corruption
    Verify,
    /// Remove every entry
    Clear {
        #[arg(long)]
        yes: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.global.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let default_inference = InferenceArgs::default();
    let inference = match &cli.command {
        Command::Classify(a) => &a.inference,
        Command::Evaluate(a) => &a.inference,
        Command::Attribute(a) => &a.inference,
        _ => &default_inference,
    };
    let config = RunConfig::resolve(&cli.global, inference, &file, &|k| std::env::var(k).ok())?;
    if cli.global.verbose {
        for line in config.describe() {
            eprintln!("config: {line}");
        }
    }
    let json = cli.global.json;
    match cli.command {
        Command::Build(a) => commands::build(&a, config, json),
        Command::Classify(a) => commands::classify(&a, &config, json),
        Command::Evaluate(a) => commands::evaluate(&a, config, json),
        Command::Attribute(a) => commands::attribute(&a, &config, json),
        Command::Cache(c) => commands::cache(&c, &config, json),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
