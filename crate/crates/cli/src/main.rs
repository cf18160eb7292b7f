//! `rwrforge`: runs the curation and reward-weighted training pipeline stage
//! by stage over a corpus root.

mod config;
mod stages;
mod state;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rwrforge_core::analytics::AnalyticsError;
use rwrforge_core::corpus::CorpusError;
use rwrforge_core::curation::CurationError;
use rwrforge_core::experiment::ExperimentError;
use rwrforge_core::model::ModelError;
use rwrforge_core::reward::RewardError;
use rwrforge_core::rwr::RwrError;
use rwrforge_core::toy::ToyError;
use rwrforge_core::trainer::TrainError;
use rwrforge_gateway::GatewayError;

use config::Loaded;
use stages::{Runner, Stage};
use state::Lock;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{stage}: missing input {file}{}", producer.map(|p| format!("; run `rwrforge {p}` first")).unwrap_or_default())]
    MissingDependency { stage: &'static str, file: String, producer: Option<&'static str> },
    #[error("{stage}: outputs were built with a different configuration; pass --force to rebuild")]
    ConfigMismatch { stage: &'static str },
    #[error("corpus root is locked by another run ({0}); remove the file if no run is active")]
    Locked(PathBuf),
    #[error("remote endpoint: {0}")]
    Remote(String),
    #[error("{0}")]
    Failed(String),
    #[error("io: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) | CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::MissingDependency { .. } => 3,
            CliError::ConfigMismatch { .. } => 4,
            CliError::Locked(_) => 5,
            CliError::Remote(_) => 6,
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Config(m) | GatewayError::Template(m) => CliError::Config(m),
            e => CliError::Remote(e.to_string()),
        }
    }
}

impl From<CurationError> for CliError {
    fn from(e: CurationError) -> Self {
        match e {
            CurationError::Endpoint(m) => CliError::Remote(m),
            e @ (CurationError::UnknownCategory { .. }
            | CurationError::EmptyCategory { .. }
            | CurationError::MissingHeader { .. }
            | CurationError::Policy(_)) => CliError::Config(e.to_string()),
            e => CliError::Failed(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Curation(c) => c.into(),
            e => CliError::Failed(e.to_string()),
        }
    }
}

macro_rules! failed_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Failed(e.to_string())
            }
        }
    )*};
}

failed_from!(CorpusError, ModelError, RewardError, RwrError, TrainError, AnalyticsError, ToyError);

#[derive(Parser)]
#[command(name = "rwrforge", version, about = "Weak-prompt curation and reward-weighted post-training")]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true, default_value = "rwrforge.toml")]
    config: PathBuf,
    /// Print what would run without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Rebuild even when outputs are current or were made with another config.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the seed prompt file into seeds.jsonl.
    Seed,
    /// Expand seeds into the full prompt set.
    Expand,
    /// Pretrain (or load) the base model and sample it on every prompt.
    Sample,
    /// Score samples with the configured rewards.
    Label,
    /// Per-prompt reward distributions, histograms and dip statistics.
    Analyze,
    /// Select weak prompts and split off a held-out half.
    Curate,
    /// Reward-weighted sample weights for the training prompts.
    Weight,
    /// Pack weighted examples into token-budgeted training groups.
    Pack,
    /// Fine-tune the base model on the packed data.
    Train,
    /// Score base and trained models on held-out prompts.
    Eval,
    /// Weighting-mode and prompt-selection ablations.
    Ablate,
    /// Markdown summary of the run.
    Report,
    /// Every stage in order, skipping those already current.
    Run,
}

impl Command {
    fn stages(&self) -> Vec<Stage> {
        let one = match self {
            Command::Seed => Stage::Seed,
            Command::Expand => Stage::Expand,
            Command::Sample => Stage::Sample,
            Command::Label => Stage::Label,
            Command::Analyze => Stage::Analyze,
            Command::Curate => Stage::Curate,
            Command::Weight => Stage::Weight,
            Command::Pack => Stage::Pack,
            Command::Train => Stage::Train,
            Command::Eval => Stage::Eval,
            Command::Ablate => Stage::Ablate,
            Command::Report => Stage::Report,
            Command::Run => return Stage::ALL.to_vec(),
        };
        vec![one]
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let loaded = Loaded::load(&cli.config)?;
    let root = loaded.root();
    let runner = Runner { loaded: &loaded, root: root.clone(), force: cli.force, dry_run: cli.dry_run };
    let stages = cli.command.stages();
    if cli.dry_run {
        runner.run(&stages)?;
        return Ok(());
    }
    std::fs::create_dir_all(&root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
    let _lock = Lock::acquire(&root)?;
    runner.run(&stages)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
