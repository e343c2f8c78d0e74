#![allow(dead_code)]

use std::sync::Arc;

use cohort::config::BudgetLimits;
use cohort::gateway::{CostModel, ModelGateway, Price, Script, ScriptedBackend};
use cohort::scaffold::{AgentConfig, AgentScaffold, TeamScaffold};
use cohort::FakeClock;

pub const MODEL: &str = "scripted";

/// Team whose first listed agent is the entry agent.
pub fn team(agents: &[&str]) -> TeamScaffold {
    TeamScaffold {
        version: 0,
        entry: agents[0].to_string(),
        constitution: "Deliver correct work and keep teammates informed.".into(),
        organization: String::new(),
        pool: agents
            .iter()
            .map(|a| {
                AgentScaffold::new(
                    *a,
                    format!("# {}\nYou handle the {a} part of the work.", title(a)),
                    AgentConfig::new(MODEL),
                )
            })
            .collect(),
    }
}

fn title(name: &str) -> String {
    let mut c = name.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

/// $1 per million input tokens, $2 per million output tokens.
pub fn costs() -> CostModel {
    CostModel::default().with(MODEL, Price::per_million(1.0, 2.0))
}

pub fn gateway(src: &str, clock: &FakeClock) -> (ModelGateway, Arc<ScriptedBackend>) {
    let script = Script::parse(src).expect("script parses");
    let clock: Arc<dyn cohort::Clock> = Arc::new(clock.clone());
    let backend = Arc::new(ScriptedBackend::new(script, clock.clone()));
    (ModelGateway::new(backend.clone(), costs(), clock), backend)
}

pub fn limits(seconds: f64, messages: u64, dollars: f64) -> BudgetLimits {
    BudgetLimits {
        max_seconds: seconds,
        max_messages: messages,
        max_cost: dollars,
    }
}

pub fn roomy() -> BudgetLimits {
    limits(1800.0, 600, 50.0)
}

pub mod oracle;
pub mod suite;
pub mod toy;

/// Every file under `root`, keyed by relative path.
pub fn tree_bytes(root: &std::path::Path) -> std::collections::BTreeMap<std::path::PathBuf, Vec<u8>> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut std::collections::BTreeMap<std::path::PathBuf, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(root, root, &mut out);
    out
}
