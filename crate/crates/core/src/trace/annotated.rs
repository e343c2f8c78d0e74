//! Externally annotated traces for attribution benchmarks.
//!
//! One JSON object per line. The first line is the header
//! `{"mistake_agent": .., "mistake_step": ..}` (an optional `"id"` names the
//! trace); every following line is a step `{"agent": .., "input": ..,
//! "output": ..}`. Steps are numbered from 1 in file order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{SchemaError, StepRecord, TraceError};

/// Boundary between the two length buckets, in estimated tokens.
pub const SPLIT_TOKENS: u64 = 128_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TokenBucket {
    #[serde(rename = "<=128K")]
    UpTo128K,
    #[serde(rename = ">128K")]
    Over128K,
}

impl TokenBucket {
    pub fn of(tokens: u64) -> Self {
        if tokens <= SPLIT_TOKENS {
            TokenBucket::UpTo128K
        } else {
            TokenBucket::Over128K
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TokenBucket::UpTo128K => "<=128K",
            TokenBucket::Over128K => ">128K",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedTrace {
    pub id: String,
    pub steps: Vec<StepRecord>,
    /// `(mistake_agent, mistake_step)`, step numbered globally from 1.
    pub ground_truth: (String, u32),
    /// Approximate token length: total characters divided by four, rounded up.
    pub token_estimate: u64,
}

impl AnnotatedTrace {
    pub fn new(id: impl Into<String>, steps: Vec<StepRecord>, ground_truth: (String, u32)) -> Self {
        let chars: u64 = steps
            .iter()
            .map(|s| (s.input.chars().count() + s.output.chars().count()) as u64)
            .sum();
        Self {
            id: id.into(),
            steps,
            ground_truth,
            token_estimate: chars.div_ceil(4),
        }
    }

    pub fn bucket(&self) -> TokenBucket {
        TokenBucket::of(self.token_estimate)
    }

    /// Serializes back into the import format.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::json!({
            "id": self.id,
            "mistake_agent": self.ground_truth.0,
            "mistake_step": self.ground_truth.1,
        })
        .to_string();
        out.push('\n');
        for s in &self.steps {
            out.push_str(
                &serde_json::json!({"agent": s.agent, "input": s.input, "output": s.output})
                    .to_string(),
            );
            out.push('\n');
        }
        out
    }
}

fn field<'a>(obj: &'a Value, line: usize, record: &str, name: &str) -> Result<&'a Value, SchemaError> {
    obj.get(name).ok_or_else(|| SchemaError {
        line,
        record: format!("{record}.{name}"),
        message: "missing field".into(),
    })
}

fn string(v: &Value, line: usize, what: String) -> Result<String, SchemaError> {
    v.as_str().map(str::to_string).ok_or(SchemaError {
        line,
        record: what,
        message: "expected a string".into(),
    })
}

pub fn parse_annotated(id: &str, text: &str) -> Result<AnnotatedTrace, SchemaError> {
    let mut header: Option<(Option<String>, String, u32, usize)> = None;
    let mut steps = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record = if header.is_none() { "header" } else { "step" };
        let v: Value = serde_json::from_str(line).map_err(|e| SchemaError {
            line: n,
            record: record.into(),
            message: format!("invalid JSON: {e}"),
        })?;
        if !v.is_object() {
            return Err(SchemaError {
                line: n,
                record: record.into(),
                message: "expected a JSON object".into(),
            });
        }
        if header.is_none() {
            let agent = string(field(&v, n, "header", "mistake_agent")?, n, "header.mistake_agent".into())?;
            let step = field(&v, n, "header", "mistake_step")?
                .as_u64()
                .filter(|s| *s >= 1 && *s <= u32::MAX as u64)
                .ok_or(SchemaError {
                    line: n,
                    record: "header.mistake_step".into(),
                    message: "expected a positive integer".into(),
                })?;
            let name = v.get("id").and_then(Value::as_str).map(str::to_string);
            header = Some((name, agent, step as u32, n));
            continue;
        }
        let index = steps.len() as u32 + 1;
        let rec = format!("step {index}");
        steps.push(StepRecord {
            index,
            agent: string(field(&v, n, &rec, "agent")?, n, format!("{rec}.agent"))?,
            input: string(field(&v, n, &rec, "input")?, n, format!("{rec}.input"))?,
            output: string(field(&v, n, &rec, "output")?, n, format!("{rec}.output"))?,
        });
    }
    let (name, agent, step, header_line) = header.ok_or(SchemaError {
        line: 1,
        record: "header".into(),
        message: "empty file".into(),
    })?;
    if steps.is_empty() {
        return Err(SchemaError {
            line: header_line + 1,
            record: "step 1".into(),
            message: "trace has no steps".into(),
        });
    }
    if step as usize > steps.len() {
        return Err(SchemaError {
            line: header_line,
            record: "header.mistake_step".into(),
            message: format!("step {step} beyond the last step {}", steps.len()),
        });
    }
    if !steps.iter().any(|s| s.agent == agent) {
        return Err(SchemaError {
            line: header_line,
            record: "header.mistake_agent".into(),
            message: format!("agent `{agent}` has no steps"),
        });
    }
    Ok(AnnotatedTrace::new(name.unwrap_or_else(|| id.to_string()), steps, (agent, step)))
}

/// Reads an annotated trace; the file stem is the default id.
pub fn import_annotated(path: &Path) -> Result<AnnotatedTrace, TraceError> {
    let text = fs::read_to_string(path)?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(parse_annotated(&stem, &text)?)
}
