//! Line-delimited experience files: a header record, one record per event,
//! then the outcome record.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Experience, SchemaError, TraceError};
use crate::runtime::{BusEvent, Task, TaskOutcome};

pub const FORMAT_VERSION: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    episode_id: String,
    /// Absent in version 1 files.
    #[serde(default)]
    team_version: u64,
    task: Task,
    /// Absent in version 1 files; recomputed from the events on load.
    #[serde(default)]
    agents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header(Header),
    Event(BusEvent),
    Outcome(TaskOutcome),
}

impl Record {
    fn name(&self) -> &'static str {
        match self {
            Record::Header(_) => "header",
            Record::Event(_) => "event",
            Record::Outcome(_) => "outcome",
        }
    }
}

pub fn to_jsonl(e: &Experience) -> String {
    let mut out = String::new();
    let mut push = |r: &Record| {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    };
    push(&Record::Header(Header {
        format_version: FORMAT_VERSION,
        episode_id: e.episode_id.clone(),
        team_version: e.team_version,
        task: e.task.clone(),
        agents: e.trajectory.agents().to_vec(),
    }));
    for ev in e.trajectory.events() {
        push(&Record::Event(ev.clone()));
    }
    push(&Record::Outcome(e.outcome.clone()));
    out
}

fn schema(line: usize, record: impl Into<String>, message: impl Into<String>) -> SchemaError {
    SchemaError {
        line,
        record: record.into(),
        message: message.into(),
    }
}

/// Parses an experience file, checking record order and seq density.
pub fn from_jsonl(text: &str) -> Result<Experience, SchemaError> {
    let mut header: Option<Header> = None;
    let mut events: Vec<BusEvent> = Vec::new();
    let mut outcome: Option<TaskOutcome> = None;
    let mut last_line = 0;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        last_line = n;
        if line.trim().is_empty() {
            continue;
        }
        let expected = if header.is_none() {
            "header"
        } else if outcome.is_none() {
            "event"
        } else {
            "end of file"
        };
        let record: Record = serde_json::from_str(line)
            .map_err(|e| schema(n, expected, format!("unparseable record: {e}")))?;
        match (record, &header, &outcome) {
            (Record::Header(h), None, _) => {
                if h.format_version == 0 || h.format_version > FORMAT_VERSION {
                    return Err(schema(
                        n,
                        "header",
                        format!("unsupported format_version {}", h.format_version),
                    ));
                }
                header = Some(h);
            }
            (_, _, Some(_)) => return Err(schema(n, "end of file", "record after the outcome")),
            (Record::Event(ev), Some(_), None) => {
                if ev.seq != events.len() as u64 {
                    return Err(schema(
                        n,
                        format!("event seq {}", ev.seq),
                        format!("expected seq {}", events.len()),
                    ));
                }
                events.push(ev);
            }
            (Record::Outcome(o), Some(_), None) => outcome = Some(o),
            (r, _, _) => {
                return Err(schema(n, expected, format!("unexpected `{}` record", r.name())));
            }
        }
    }
    let header = header.ok_or_else(|| schema(1, "header", "missing header record"))?;
    let outcome = outcome.ok_or_else(|| {
        schema(
            last_line + 1,
            "outcome",
            "missing outcome record (truncated file?)",
        )
    })?;
    Ok(Experience::freeze(
        header.episode_id,
        header.team_version,
        header.task,
        events,
        outcome,
    ))
}

pub fn export(e: &Experience, path: &Path) -> Result<(), TraceError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, to_jsonl(e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Experience, TraceError> {
    let text = fs::read_to_string(path)?;
    Ok(from_jsonl(&text)?)
}
