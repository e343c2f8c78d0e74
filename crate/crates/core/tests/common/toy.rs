//! A two-task curriculum where one committed patch turns a failing lead into
//! a passing one.

use std::path::{Path, PathBuf};

use cohort::evaluator::ScriptedEvaluator;
use cohort::evolution::{evolve_episode, run_evolution, EpisodeRecord, EvolutionConfig, EvolutionContext};
use cohort::runtime::{run_task, EpisodeConfig, Task};
use cohort::scaffold::{save_team, ScaffoldStore, StoreOptions};
use cohort::trace::ExperienceStore;
use cohort::FakeClock;

use super::{gateway, roomy, team};

pub const PATCH: &str = "Double-check the arithmetic before you finalize.";

pub fn script() -> String {
    format!(
        "\
=== lead 1
when Double-check the arithmetic
usage 1500 100
call finalize {{\"deliverable\": \"42\"}}
=== lead 1
when Add 20
usage 1500 100
call finalize {{\"deliverable\": \"41\"}}
=== lead#l1 1
when (failed)
usage 4000 300
text {{\"patches\": [\"{PATCH}\"], \"summary\": \"I finalized an unchecked total.\"}}
=== lead#l1 1
text {{\"patches\": [], \"summary\": \"The checked total was accepted.\"}}
=== team#l3 1
when (failed)
usage 3000 200
text {{\"retry\": true}}
=== team#l3 1
text {{}}
"
    )
}

pub fn tasks() -> Vec<Task> {
    vec![Task::new("t1", "Add 20 and 22."), Task::new("t2", "Add 20 and 22 once more.")]
}

pub struct ToyRun {
    pub records: Vec<EpisodeRecord>,
    pub scaffold: PathBuf,
    pub experiences: PathBuf,
    pub audit: PathBuf,
    pub store: ScaffoldStore,
}

/// Runs `tasks` from a fresh version-0 team under `dir`.
pub fn run_toy(dir: &Path, tasks: &[Task], resume: bool) -> ToyRun {
    run_toy_with(dir, tasks, resume, EvolutionConfig::default())
}

pub fn run_toy_with(dir: &Path, tasks: &[Task], resume: bool, config: EvolutionConfig) -> ToyRun {
    let scaffold = dir.join("team");
    if !scaffold.exists() {
        save_team(&team(&["lead", "checker"]), &scaffold).unwrap();
    }
    let store = ScaffoldStore::open(&scaffold, StoreOptions::default()).unwrap();
    let clock = FakeClock::fixed();
    let (gw, _) = gateway(&script(), &clock);
    let evaluator = ScriptedEvaluator::passes_if_contains("42");
    let ctx = EvolutionContext {
        gateway: &gw,
        evaluator: &evaluator,
        limits: roomy(),
        episode: EpisodeConfig::default(),
        config,
    };
    let experiences = dir.join("experiences");
    let audit = dir.join("audit.jsonl");
    let xs = ExperienceStore::open(&experiences).unwrap();
    let records = run_evolution(&store, tasks, &ctx, &xs, &audit, resume).unwrap();
    ToyRun {
        records,
        scaffold,
        experiences,
        audit,
        store,
    }
}

pub struct GateOutcome {
    pub failed: Vec<String>,
    pub notes: Vec<String>,
    pub committed: bool,
    pub untouched: bool,
}

/// Runs one failing lead episode, then evolves with `l1` as the lead's
/// reflection reply (4000 in / 300 out tokens) and reports what the gate did.
pub fn evolve_once(dir: &Path, l1: &str, config: EvolutionConfig) -> GateOutcome {
    let root = dir.join("team");
    save_team(&team(&["lead", "checker"]), &root).unwrap();
    let store = ScaffoldStore::open(&root, StoreOptions::default()).unwrap();
    let before = super::tree_bytes(&root);
    let script = format!(
        "=== lead 1\ncall finalize {{\"deliverable\": \"41\"}}\n=== lead#l1 1\nusage 4000 300\ntext {l1}\n=== team#l3 1\ntext {{\"retry\": true}}\n"
    );
    let clock = FakeClock::fixed();
    let (gw, _) = gateway(&script, &clock);
    let evaluator = ScriptedEvaluator::passes_if_contains("42");
    let e = run_task(&store.snapshot(), &Task::new("t1", "Add."), &roomy(), &gw, &evaluator).unwrap();
    let ctx = EvolutionContext {
        gateway: &gw,
        evaluator: &evaluator,
        limits: roomy(),
        episode: EpisodeConfig::default(),
        config,
    };
    let step = evolve_episode(&store, &e, &ctx).unwrap();
    GateOutcome {
        failed: step.gate.failed().into_iter().map(str::to_string).collect(),
        notes: step.notes,
        committed: step.committed,
        untouched: super::tree_bytes(&root) == before && store.snapshot().version == 0,
    }
}
