//! Structured fields out of free-form analyzer replies.

use serde_json::Value;

use super::{StepIndex, Submission, Verdict};

/// The reply itself if it is a JSON object, otherwise the outermost
/// `{ ... }` span inside it.
pub fn extract_json(text: &str) -> Option<Value> {
    let trimmed = text.trim();
    if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(trimmed) {
        return Some(v);
    }
    let start = trimmed.find('{')?;
    let end = trimmed.rfind('}')?;
    if end <= start {
        return None;
    }
    match serde_json::from_str::<Value>(&trimmed[start..=end]) {
        Ok(v @ Value::Object(_)) => Some(v),
        _ => None,
    }
}

fn flag(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::Number(n) => match n.as_u64() {
            Some(0) => Some(false),
            Some(1) => Some(true),
            _ => None,
        },
        _ => None,
    }
}

fn step(v: &Value) -> Option<u32> {
    v.as_u64().filter(|s| *s >= 1 && *s <= u32::MAX as u64).map(|s| s as u32)
}

fn first<'a>(obj: &'a Value, keys: &[&str]) -> Option<&'a Value> {
    keys.iter().find_map(|k| obj.get(*k).filter(|v| !v.is_null()))
}

/// `{"agent": .., "step": ..}` naming an existing agent and global step.
pub fn parse_verdict(text: &str, index: &StepIndex) -> Result<Verdict, String> {
    let obj = extract_json(text).ok_or("no JSON object in reply")?;
    let agent = first(&obj, &["agent", "mistake_agent"])
        .and_then(Value::as_str)
        .ok_or("missing string field `agent`")?;
    let s = first(&obj, &["step", "mistake_step"])
        .and_then(step)
        .ok_or("missing positive integer field `step`")?;
    if !index.contains_agent(agent) {
        return Err(format!("agent `{agent}` does not appear in the trace"));
    }
    if s > index.len() {
        return Err(format!("step {s} beyond the last step {}", index.len()));
    }
    Ok(Verdict::new(agent, s))
}

/// `{"i_erred": .., "my_step": .., "confidence": .., "disagree": ..}`.
///
/// Confidence outside `[0, 1]` is clamped and reported in the returned
/// warnings; a missing `disagree` reads as false.
pub fn parse_submission(
    analyzer: &str,
    text: &str,
    local_len: u32,
) -> Result<(Submission, Vec<String>), String> {
    let obj = extract_json(text).ok_or("no JSON object in reply")?;
    let i_erred = obj
        .get("i_erred")
        .and_then(flag)
        .ok_or("missing boolean field `i_erred`")?;
    let raw = obj
        .get("confidence")
        .and_then(Value::as_f64)
        .filter(|c| c.is_finite())
        .ok_or("missing numeric field `confidence`")?;
    let mut warnings = Vec::new();
    let confidence = raw.clamp(0.0, 1.0);
    if confidence != raw {
        warnings.push(format!("{analyzer}: confidence {raw} clamped to {confidence}"));
    }
    let disagree = match obj.get("disagree") {
        None | Some(Value::Null) => false,
        Some(v) => flag(v).ok_or("field `disagree` is not a boolean")?,
    };
    let my_step = if i_erred {
        let s = obj
            .get("my_step")
            .and_then(step)
            .ok_or("missing positive integer field `my_step`")?;
        if s > local_len {
            return Err(format!("my_step {s} beyond the local trace of {local_len} steps"));
        }
        s
    } else {
        0
    };
    Ok((
        Submission {
            analyzer: analyzer.into(),
            i_erred,
            my_step,
            confidence,
            disagree,
        },
        warnings,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryPost {
    pub summary: String,
    /// Global `(agent, step)` the analyzer suspects, if it names one.
    pub suspect: Option<Verdict>,
}

/// A summary reply: either `{"summary": .., "suspect_agent": ..,
/// "suspect_step": ..}` or plain text.
pub fn parse_summary(text: &str, index: &StepIndex) -> SummaryPost {
    let Some(obj) = extract_json(text) else {
        return SummaryPost {
            summary: text.trim().to_string(),
            suspect: None,
        };
    };
    let summary = obj
        .get("summary")
        .and_then(Value::as_str)
        .map(str::to_string)
        .unwrap_or_else(|| text.trim().to_string());
    let suspect = match (
        obj.get("suspect_agent").and_then(Value::as_str),
        obj.get("suspect_step").and_then(step),
    ) {
        (Some(a), Some(s)) if index.contains_agent(a) && s <= index.len() => Some(Verdict::new(a, s)),
        _ => None,
    };
    SummaryPost { summary, suspect }
}
