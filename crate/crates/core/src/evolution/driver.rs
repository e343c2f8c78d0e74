//! Episode loop: run, reflect, gate, commit, optionally retry.

use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, Write};
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::gate::{commit_gate, GateContext, GateReport};
use super::reflect::{reflect, EvolutionConfig};
use super::update::{EvolutionUpdate, SpendKind};
use crate::config::BudgetLimits;
use crate::evaluator::Evaluator;
use crate::gateway::{Cost, ModelGateway};
use crate::runtime::{Episode, EpisodeConfig, RuntimeError, Task};
use crate::scaffold::{ScaffoldError, ScaffoldStore};
use crate::trace::{Experience, ExperienceStore, TraceError};

/// Failures that stop an evolution run. Runtime and model failures of a
/// single episode are recorded instead.
#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("invalid evolution config: {0}")]
    Config(String),
    #[error(transparent)]
    Scaffold(#[from] ScaffoldError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("audit log: {0}")]
    Audit(String),
}

impl From<io::Error> for EvolutionError {
    fn from(e: io::Error) -> Self {
        EvolutionError::Audit(e.to_string())
    }
}

pub struct EvolutionContext<'a> {
    pub gateway: &'a ModelGateway,
    pub evaluator: &'a dyn Evaluator,
    pub limits: BudgetLimits,
    /// Template for every episode; the episode id is set per task.
    pub episode: EpisodeConfig,
    pub config: EvolutionConfig,
}

impl EvolutionContext<'_> {
    pub fn budget(&self) -> Cost {
        self.config.budget.unwrap_or_else(|| self.limits.max_cost())
    }

    fn gate(&self, store: &ScaffoldStore) -> GateContext {
        GateContext {
            tools: self.episode.tools.names(),
            budget: self.budget(),
            reflection_cap: self.config.reflection_cost_cap,
            store: store.options(),
        }
    }

    fn run(&self, store: &ScaffoldStore, task: &Task, id: &str, limits: &BudgetLimits) -> Result<Experience, RuntimeError> {
        let mut cfg = self.episode.clone();
        cfg.episode_id = Some(id.to_string());
        Episode::new(store.snapshot(), task.clone(), limits, self.gateway.clone(), cfg)?.run(self.evaluator)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryRecord {
    pub episode_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passed: Option<bool>,
    pub cost: Cost,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Result of evolving on one experience.
#[derive(Debug, Clone)]
pub struct EvolutionStep {
    pub update: EvolutionUpdate,
    pub gate: GateReport,
    pub committed: bool,
    pub version: u64,
    pub notes: Vec<String>,
    pub l3_prompt: String,
    pub retry: Option<RetryRecord>,
    pub retry_experience: Option<Experience>,
}

/// Reflects on `e`, gates the update and commits it when accepted and
/// non-empty. A team-requested retry runs once, only after a commit, with
/// what is left of the evolution budget.
pub fn evolve_episode(
    store: &ScaffoldStore,
    e: &Experience,
    ctx: &EvolutionContext,
) -> Result<EvolutionStep, EvolutionError> {
    ctx.config.validate().map_err(EvolutionError::Config)?;
    let team = store.snapshot();
    let reflection = reflect(&team, e, ctx.gateway, &ctx.config);
    let mut notes = reflection.notes();
    let mut update = reflection.update;
    let gate = commit_gate(&update, &team, &ctx.gate(store));
    let mut version = team.version;
    let committed = gate.accepted && !update.is_empty();
    if committed {
        let (next, log) = store.commit(&update)?;
        version = next.version;
        notes.extend(log.notes);
        info!("{}: committed version {version}", e.episode_id());
    } else if !gate.accepted {
        warn!("{}: update rejected by {:?}", e.episode_id(), gate.failed());
    }

    let mut retry = None;
    let mut retry_experience = None;
    let spent = update.spend.total();
    if update.team.retry && !committed {
        notes.push("retry requested without a committed update; skipped".into());
    } else if update.team.retry && spent >= ctx.budget() {
        notes.push("retry requested with no evolution budget left; skipped".into());
    } else if update.team.retry {
        let remaining = ctx.budget().saturating_sub(spent);
        let mut limits = ctx.limits.clone();
        limits.max_cost = limits.max_cost.min(remaining.dollars());
        let id = format!("{}.retry", e.episode_id());
        let (record, exp) = match ctx.run(store, e.task(), &id, &limits) {
            Ok(x) => {
                let o = x.outcome();
                let r = RetryRecord {
                    episode_id: id.clone(),
                    score: Some(o.score.value),
                    passed: Some(o.score.passed),
                    cost: x.total_cost(),
                    error: None,
                };
                (r, Some(x))
            }
            Err(err) => {
                let r = RetryRecord {
                    episode_id: id.clone(),
                    score: None,
                    passed: None,
                    cost: Cost::ZERO,
                    error: Some(err.to_string()),
                };
                (r, None)
            }
        };
        update.spend.record(id, SpendKind::Retry, record.cost);
        retry = Some(record);
        retry_experience = exp;
    }
    Ok(EvolutionStep {
        update,
        gate,
        committed,
        version,
        notes,
        l3_prompt: reflection.team.prompt,
        retry,
        retry_experience,
    })
}

/// One line of the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: String,
    pub task_id: String,
    pub version_before: u64,
    pub version_after: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passed: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub committed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateReport>,
    /// Evolution spend including any retry.
    pub evolution_cost: Cost,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry: Option<RetryRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub fn episode_id(k: usize, task: &Task) -> String {
    format!("e{k:03}-{}", task.id)
}

pub fn read_audit(path: &Path) -> Result<Vec<EpisodeRecord>, EvolutionError> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (i, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| EvolutionError::Audit(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn append_audit(path: &Path, rec: &EpisodeRecord) -> Result<(), EvolutionError> {
    let mut line = serde_json::to_string(rec).map_err(|e| EvolutionError::Audit(e.to_string()))?;
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    f.sync_all()?;
    Ok(())
}

/// Runs the curriculum in order, evolving after each episode. With `resume`,
/// episodes already in the audit log are skipped; otherwise the log starts
/// empty.
pub fn run_evolution(
    store: &ScaffoldStore,
    tasks: &[Task],
    ctx: &EvolutionContext,
    experiences: &ExperienceStore,
    audit: &Path,
    resume: bool,
) -> Result<Vec<EpisodeRecord>, EvolutionError> {
    ctx.config.validate().map_err(EvolutionError::Config)?;
    let mut records = if resume {
        read_audit(audit)?
    } else {
        fs::write(audit, "")?;
        Vec::new()
    };
    for (i, task) in tasks.iter().enumerate() {
        let id = episode_id(i + 1, task);
        if records.iter().any(|r| r.episode_id == id) {
            continue;
        }
        let before = store.snapshot().version;
        let mut rec = EpisodeRecord {
            episode_id: id.clone(),
            task_id: task.id.clone(),
            version_before: before,
            version_after: before,
            score: None,
            passed: None,
            error: None,
            committed: false,
            gate: None,
            evolution_cost: Cost::ZERO,
            retry: None,
            notes: Vec::new(),
        };

        let stored = match experiences.get(&id) {
            Ok(x) => Some(x),
            Err(TraceError::NotFound(_)) => None,
            Err(e) => return Err(e.into()),
        };
        let exp = match stored {
            // The episode ran before an interruption.
            Some(x) => {
                rec.notes.push("experience recovered from the store".into());
                Ok(x)
            }
            None => ctx.run(store, task, &id, &ctx.limits),
        };
        match exp {
            Err(err) => {
                warn!("{id}: {err}");
                rec.error = Some(err.to_string());
            }
            Ok(x) => {
                experiences.put(&x)?;
                rec.score = Some(x.outcome().score.value);
                rec.passed = Some(x.outcome().score.passed);
                if x.team_version() != before {
                    // Its update was committed before the interruption.
                    rec.version_before = x.team_version();
                    rec.committed = true;
                    rec.notes.push("update already committed before the interruption".into());
                } else {
                    let step = evolve_episode(store, &x, ctx)?;
                    if let Some(r) = &step.retry_experience {
                        experiences.put(r)?;
                    }
                    rec.version_after = step.version;
                    rec.committed = step.committed;
                    rec.gate = Some(step.gate);
                    rec.evolution_cost = step.update.spend.total();
                    rec.retry = step.retry;
                    rec.notes.extend(step.notes);
                }
            }
        }
        append_audit(audit, &rec)?;
        records.push(rec);
    }
    Ok(records)
}
