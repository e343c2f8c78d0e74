use std::fmt;

use cohort::attribution::AttributionError;
use cohort::config::ConfigError;
use cohort::evaluator::EvaluatorError;
use cohort::evolution::EvolutionError;
use cohort::gateway::GatewayError;
use cohort::runtime::RuntimeError;
use cohort::scaffold::ScaffoldError;
use cohort::trace::TraceError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_SCAFFOLD: u8 = 2;
pub const EXIT_TRACE: u8 = 3;
pub const EXIT_GATEWAY: u8 = 4;
pub const EXIT_EVALUATOR: u8 = 5;
pub const EXIT_USAGE: u8 = 64;

pub const EXIT_CODES: &str = "\
Exit codes:
  0   success (including force-finalized episodes)
  1   runtime failure, or a replay that diverged
  2   scaffold missing, malformed or failing validation
  3   trace file unreadable or not matching the schema
  4   model gateway failure
  5   evaluator failure
  64  bad arguments or configuration";

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ScaffoldError> for CliError {
    fn from(e: ScaffoldError) -> Self {
        Self::new(EXIT_SCAFFOLD, e.to_string())
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        let code = match e {
            TraceError::Io(_) | TraceError::Immutable(_) => EXIT_RUNTIME,
            _ => EXIT_TRACE,
        };
        Self::new(code, e.to_string())
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        Self::new(EXIT_GATEWAY, e.to_string())
    }
}

impl From<EvaluatorError> for CliError {
    fn from(e: EvaluatorError) -> Self {
        Self::new(EXIT_EVALUATOR, e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<RuntimeError> for CliError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::GatewayUnavailable(e) => e.into(),
            RuntimeError::EvaluatorFailure(e) => e.into(),
            RuntimeError::InvalidTeam(e) => e.into(),
            RuntimeError::InvalidBudget(e) => e.into(),
            e @ RuntimeError::UnknownTool { .. } => Self::new(EXIT_SCAFFOLD, e.to_string()),
            e => Self::new(EXIT_RUNTIME, e.to_string()),
        }
    }
}

impl From<EvolutionError> for CliError {
    fn from(e: EvolutionError) -> Self {
        match e {
            EvolutionError::Config(m) => Self::usage(format!("invalid evolution config: {m}")),
            EvolutionError::Scaffold(e) => e.into(),
            EvolutionError::Trace(e) => e.into(),
            e => Self::new(EXIT_RUNTIME, e.to_string()),
        }
    }
}

impl From<AttributionError> for CliError {
    fn from(e: AttributionError) -> Self {
        match e {
            AttributionError::Gateway(e) => e.into(),
            AttributionError::InvalidConfig(m) => Self::usage(m),
            e => Self::new(EXIT_TRACE, e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_RUNTIME, e.to_string())
    }
}
