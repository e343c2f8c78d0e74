//! Failure attribution over step-record traces.
//!
//! A trace is a dense list of [`StepRecord`]s numbered from 1. Three schemes
//! name the decisive `(agent, step)`: a single flattened pass
//! ([`attribute_global`]), isolated per-agent analyzers ([`attribute_local`])
//! and per-agent analyzers that exchange summaries before a weighted vote
//! ([`attribute_collaborative`]).

mod parse;
mod schemes;
mod score;
mod vote;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Cost, GatewayError};
use crate::trace::StepRecord;

pub use parse::{extract_json, parse_submission, parse_summary, parse_verdict, SummaryPost};
pub use schemes::{attribute, attribute_collaborative, attribute_global, attribute_local, Scheme};
pub use score::{bucket_report, score, Accuracy, BucketReport, EmptyPolicy};
pub use vote::{aggregate_votes, Tally, TIE_EPSILON};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("trace has no steps")]
    EmptyTrace,
    #[error("step {position} is numbered {index}; steps must be numbered 1..n in order")]
    SparseSteps { position: usize, index: u32 },
    #[error("{verdicts} verdicts against {truths} ground-truth labels")]
    LengthMismatch { verdicts: usize, truths: usize },
    #[error("invalid scheme config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// One analyzer's self-assessment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub analyzer: String,
    pub i_erred: bool,
    /// 1-based index into the analyzer's own sub-trace.
    pub my_step: u32,
    pub confidence: f64,
    /// Disagrees with the provisional verdict, with counter-evidence.
    pub disagree: bool,
}

impl Submission {
    pub fn accuse(analyzer: &str, my_step: u32, confidence: f64) -> Self {
        Self {
            analyzer: analyzer.into(),
            i_erred: true,
            my_step,
            confidence,
            disagree: false,
        }
    }

    pub fn deny(analyzer: &str, confidence: f64) -> Self {
        Self {
            analyzer: analyzer.into(),
            i_erred: false,
            my_step: 0,
            confidence,
            disagree: false,
        }
    }

    pub fn disagreeing(mut self) -> Self {
        self.disagree = true;
        self
    }

    /// Vote weight `c * (1 + alpha * r)`.
    pub fn weight(&self, alpha: f64) -> f64 {
        let r = if self.disagree { 1.0 } else { 0.0 };
        self.confidence * (1.0 + alpha * r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Verdict {
    pub mistake_agent: String,
    /// Global step index, 1-based.
    pub mistake_step: u32,
}

impl Verdict {
    pub fn new(agent: impl Into<String>, step: u32) -> Self {
        Self {
            mistake_agent: agent.into(),
            mistake_step: step,
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.mistake_agent, self.mistake_step)
    }
}

/// Source of the provisional verdict analyzers may disagree with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProvisionalSource {
    /// Unweighted majority of the suspects named in the latest summaries.
    #[default]
    Consensus,
    /// A separate flattened-trace pass.
    GlobalPass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub model: String,
    pub alpha: f64,
    pub rounds: u32,
    pub provisional: ProvisionalSource,
}

impl SchemeConfig {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            alpha: 1.0,
            rounds: 1,
            provisional: ProvisionalSource::Consensus,
        }
    }

    pub fn validate(&self) -> Result<(), AttributionError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(AttributionError::InvalidConfig(format!("alpha {} must be >= 0", self.alpha)));
        }
        if self.rounds == 0 {
            return Err(AttributionError::InvalidConfig("rounds must be >= 1".into()));
        }
        Ok(())
    }
}

/// Maps each agent's local step numbers to global ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepIndex {
    /// Agents in order of first appearance.
    agents: Vec<String>,
    /// Agent to its global steps, ascending; local step `i` is entry `i - 1`.
    steps: BTreeMap<String, Vec<u32>>,
    len: u32,
}

impl StepIndex {
    pub fn new(steps: &[StepRecord]) -> Result<Self, AttributionError> {
        if steps.is_empty() {
            return Err(AttributionError::EmptyTrace);
        }
        let mut agents = Vec::new();
        let mut map: BTreeMap<String, Vec<u32>> = BTreeMap::new();
        for (i, s) in steps.iter().enumerate() {
            if s.index as usize != i + 1 {
                return Err(AttributionError::SparseSteps {
                    position: i + 1,
                    index: s.index,
                });
            }
            let entry = map.entry(s.agent.clone()).or_default();
            if entry.is_empty() {
                agents.push(s.agent.clone());
            }
            entry.push(s.index);
        }
        Ok(Self {
            agents,
            steps: map,
            len: steps.len() as u32,
        })
    }

    pub fn agents(&self) -> &[String] {
        &self.agents
    }

    pub fn len(&self) -> u32 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains_agent(&self, agent: &str) -> bool {
        self.steps.contains_key(agent)
    }

    pub fn local_len(&self, agent: &str) -> u32 {
        self.steps.get(agent).map_or(0, |s| s.len() as u32)
    }

    pub fn global(&self, agent: &str, local: u32) -> Option<u32> {
        let steps = self.steps.get(agent)?;
        local.checked_sub(1).and_then(|i| steps.get(i as usize)).copied()
    }

    pub fn first_step(&self, agent: &str) -> Option<u32> {
        self.global(agent, 1)
    }

    pub fn table(&self) -> &BTreeMap<String, Vec<u32>> {
        &self.steps
    }
}

/// A verdict plus everything needed to audit how it was reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub scheme: Scheme,
    pub verdict: Verdict,
    /// Set when no valid accusation or parse was available.
    pub fallback: Option<String>,
    pub submissions: Vec<Submission>,
    pub tally: Vec<(Verdict, f64)>,
    pub provisional: Option<Verdict>,
    /// Latest summary per analyzer, collaborative scheme only.
    pub summaries: BTreeMap<String, String>,
    pub step_map: BTreeMap<String, Vec<u32>>,
    pub warnings: Vec<String>,
    pub calls: u32,
    pub cost: Cost,
}
