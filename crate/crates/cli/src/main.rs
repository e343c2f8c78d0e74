//! Operator entry points: run episodes, evolve teams, attribute failures and
//! look at traces.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::{CliError, EXIT_CODES, EXIT_USAGE};

#[derive(Parser, Debug)]
#[command(name = "cohort", version, about = "Run, evolve and audit teams of model-driven agents", after_help = EXIT_CODES)]
pub struct Cli {
    /// Pin the clock at a fixed instant so traces are byte-reproducible.
    #[arg(long, global = true)]
    pub fixed_clock: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one episode and write its trace.
    Run(RunArgs),
    /// Run a task list, reflecting on and evolving the team after each episode.
    Evolve(EvolveArgs),
    /// Locate the decisive mistake in annotated traces and score the verdicts.
    Attribute(AttributeArgs),
    /// Print a trace as a timeline with one lane per agent.
    Inspect(InspectArgs),
    /// Re-execute a recorded episode with a scripted backend and diff the traces.
    Replay(ReplayArgs),
    /// Check a team scaffold on disk.
    Validate(ValidateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct BackendArgs {
    /// `wire` (endpoint from COHORT_ENDPOINT, key from COHORT_API_KEY) or `scripted:<path>`.
    #[arg(long, default_value = "wire")]
    pub backend: String,
    /// YAML map of model name to `{input, output}` dollars per million tokens.
    #[arg(long)]
    pub prices: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct BudgetArgs {
    /// Budget profile name.
    #[arg(long, default_value = "swe-pro")]
    pub budget: String,
    /// YAML file of extra budget profiles.
    #[arg(long)]
    pub budgets: Option<PathBuf>,
    #[arg(long)]
    pub max_seconds: Option<f64>,
    #[arg(long)]
    pub max_messages: Option<u64>,
    /// Dollars.
    #[arg(long)]
    pub max_cost: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct EpisodeArgs {
    /// Team scaffold directory.
    #[arg(long)]
    pub team: PathBuf,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub budget: BudgetArgs,
    /// `contains:<text>`, `exact:<text>` or `cmd:<program> [args..]`.
    #[arg(long)]
    pub evaluator: String,
    /// One thread per agent instead of round-robin stepping.
    #[arg(long)]
    pub concurrent: bool,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub episode: EpisodeArgs,
    /// Task file (YAML or JSON with `id`, `text` and optional `attachments`).
    #[arg(long)]
    pub task: PathBuf,
    /// Output directory for the trace.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvolveArgs {
    #[command(flatten)]
    pub episode: EpisodeArgs,
    /// Task list file (YAML or JSON list).
    #[arg(long)]
    pub tasks: PathBuf,
    /// Output directory for experiences and the audit log.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Continue an interrupted curriculum from its audit log.
    #[arg(long)]
    pub resume: bool,
    /// Model for pair and team reflection.
    #[arg(long)]
    pub model: Option<String>,
    /// Evolution budget per episode in dollars; the episode cost limit if unset.
    #[arg(long)]
    pub evolution_budget: Option<f64>,
    /// Cost cap per reflection call in dollars.
    #[arg(long)]
    pub reflection_cap: Option<f64>,
    /// Seconds allowed per reflection level.
    #[arg(long)]
    pub phase_timeout: Option<u64>,
}

#[derive(Args, Debug)]
pub struct AttributeArgs {
    /// Annotated trace files.
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
    #[arg(long, default_value = "collab")]
    pub scheme: String,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1)]
    pub rounds: u32,
    /// `consensus` or `global`: what the disagree flag is measured against.
    #[arg(long, default_value = "consensus")]
    pub provisional: String,
    /// Analyzer model.
    #[arg(long)]
    pub model: String,
    #[command(flatten)]
    pub backend: BackendArgs,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub trace: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    pub trace: PathBuf,
    #[command(flatten)]
    pub episode: EpisodeArgs,
    /// Compare traces with event timestamps blanked.
    #[arg(long)]
    pub ignore_timestamps: bool,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    /// Team scaffold directory.
    #[arg(long)]
    pub team: PathBuf,
    /// Extra tool names to treat as registered.
    #[arg(long = "tool")]
    pub tools: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(CliError { code, message }) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
