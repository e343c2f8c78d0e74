//! Scoring of final deliverables.

use std::io::Write;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::runtime::Task;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub passed: bool,
}

impl Score {
    pub fn pass() -> Self {
        Score {
            value: 1.0,
            passed: true,
        }
    }

    pub fn fail() -> Self {
        Score {
            value: 0.0,
            passed: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvaluatorError {
    #[error("evaluator command failed: {0}")]
    Command(String),
    #[error("evaluator output unreadable: {0}")]
    Output(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait Evaluator: Send + Sync {
    fn evaluate(&self, task: &Task, deliverable: &str) -> Result<Score, EvaluatorError>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum Matcher {
    Contains(String),
    Exact(String),
    Any,
}

impl Matcher {
    fn matches(&self, s: &str) -> bool {
        match self {
            Matcher::Contains(n) => s.contains(n.as_str()),
            Matcher::Exact(e) => s == e,
            Matcher::Any => true,
        }
    }
}

/// Pure rule table: the first matching rule decides the score, otherwise the
/// deliverable fails.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScriptedEvaluator {
    rules: Vec<(Matcher, Score)>,
}

impl ScriptedEvaluator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rule(mut self, m: Matcher, score: Score) -> Self {
        self.rules.push((m, score));
        self
    }

    /// Passes iff the deliverable contains `needle`.
    pub fn passes_if_contains(needle: &str) -> Self {
        Self::new().rule(Matcher::Contains(needle.to_string()), Score::pass())
    }
}

impl Evaluator for ScriptedEvaluator {
    fn evaluate(&self, _task: &Task, deliverable: &str) -> Result<Score, EvaluatorError> {
        Ok(self
            .rules
            .iter()
            .find(|(m, _)| m.matches(deliverable))
            .map(|(_, s)| *s)
            .unwrap_or_else(Score::fail))
    }
}

/// Runs an external program with the deliverable on stdin and the task id in
/// `COHORT_TASK_ID`. Stdout is either `{"score": x, "passed": b}` or a bare
/// number, which passes when it is at least 1.
#[derive(Debug, Clone)]
pub struct CommandEvaluator {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandEvaluator {
    pub fn parse_output(out: &str) -> Result<Score, EvaluatorError> {
        let trimmed = out.trim();
        if let Ok(score) = serde_json::from_str::<Score>(trimmed) {
            return Ok(score);
        }
        #[derive(Deserialize)]
        struct Alt {
            score: f64,
            passed: bool,
        }
        if let Ok(a) = serde_json::from_str::<Alt>(trimmed) {
            return Ok(Score {
                value: a.score,
                passed: a.passed,
            });
        }
        trimmed
            .parse::<f64>()
            .map(|v| Score {
                value: v,
                passed: v >= 1.0,
            })
            .map_err(|_| EvaluatorError::Output(trimmed.chars().take(120).collect()))
    }
}

impl Evaluator for CommandEvaluator {
    fn evaluate(&self, task: &Task, deliverable: &str) -> Result<Score, EvaluatorError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .env("COHORT_TASK_ID", &task.id)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        child
            .stdin
            .take()
            .expect("stdin is piped")
            .write_all(deliverable.as_bytes())?;
        let out = child.wait_with_output()?;
        if !out.status.success() {
            return Err(EvaluatorError::Command(format!(
                "{} exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Self::parse_output(&String::from_utf8_lossy(&out.stdout))
    }
}
