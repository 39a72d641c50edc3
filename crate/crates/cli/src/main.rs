//! `refgen`: command-line driver for the dataset pipeline.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data error,
//! 4 empty result.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use refgen::config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "refgen", version, about = "Referring-expression dataset pipeline")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 picks the machine default.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate expressions from a scene-graph corpus.
    Generate(GenerateArgs),
    /// Attach distractor images to expressions.
    Distract(DistractArgs),
    /// Split task instances by image into train, val and test.
    Split(SplitArgs),
    /// Dataset statistics as JSON plus a readable table on stderr.
    Stats(StatsArgs),
    /// Accuracy of a scorer under one or all settings.
    Eval(EvalArgs),
    /// Write the ground-truth scores file for a set of instances.
    OracleScores(OracleScoresArgs),
    /// Run the hard-negative sampler over stored embeddings.
    MineDemo(MineDemoArgs),
    /// Validate a JSONL or embedding file against its record type.
    SchemaCheck(SchemaCheckArgs),
    /// Write a synthetic scene-graph corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Scene-graph JSON; defaults to `paths.corpus` from the config.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory; defaults to `paths.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DistractArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    expressions: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    instances: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct StatsInput {
    #[arg(long)]
    instances: Option<PathBuf>,
    #[arg(long)]
    expressions: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[command(flatten)]
    input: StatsInput,
    /// Overrides `stats.top_k`.
    #[arg(long)]
    top_k: Option<usize>,
    /// Also write the JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct ScorerChoice {
    /// JSONL scores file.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Ground-truth scorer.
    #[arg(long)]
    oracle: bool,
    /// Uniform random scores seeded by `--seed`.
    #[arg(long)]
    random: bool,
    /// External program answering one JSON request per line.
    #[arg(long)]
    scorer_cmd: Option<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    instances: PathBuf,
    #[command(flatten)]
    scorer: ScorerChoice,
    /// Argument passed to `--scorer-cmd`; repeatable.
    #[arg(long = "scorer-arg", allow_hyphen_values = true)]
    scorer_args: Vec<String>,
    /// A setting name such as `Full` or `CatAttr`, or `all`.
    #[arg(long, default_value = "all")]
    setting: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct OracleScoresArgs {
    #[arg(long)]
    instances: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MineDemoArgs {
    /// Embeddings as JSONL or the binary format (detected by magic).
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 200)]
    iterations: u64,
    /// Loss trace as JSONL.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the embeddings in the binary format.
    #[arg(long)]
    write_binary: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RecordKind {
    Expression,
    Instance,
    Score,
    Embedding,
}

#[derive(Debug, Args)]
struct SchemaCheckArgs {
    #[arg(long, value_enum)]
    kind: RecordKind,
    file: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    images: usize,
    #[arg(long, default_value_t = 8)]
    objects: usize,
    #[arg(long)]
    out: PathBuf,
}

/// An error tagged with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    pub fn config(e: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, error: e.into() }
    }

    pub fn data(e: impl Into<anyhow::Error>) -> Self {
        Self { code: 3, error: e.into() }
    }

    pub fn empty(what: impl Into<String>) -> Self {
        Self {
            code: 4,
            error: anyhow::anyhow!("empty result: {}", what.into()),
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p).map_err(Failure::config)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(w) = cli.workers {
        config.workers = w;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = load_config(&cli)?;
    let workers = config.workers;
    refgen::pipeline::with_workers(workers, move || commands::dispatch(cli.command, &config))
        .map_err(Failure::config)?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
