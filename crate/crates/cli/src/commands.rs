use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use cohort::attribution::{attribute, bucket_report, ProvisionalSource, Scheme, SchemeConfig, Verdict};
use cohort::config::{BudgetLimits, BudgetProfiles};
use cohort::evaluator::{CommandEvaluator, Matcher, ScriptedEvaluator};
use cohort::evolution::{run_evolution, validate_scaffold, EvolutionConfig, EvolutionContext};
use cohort::gateway::{CostModel, ModelBackend, Price, Script, ScriptedBackend, WireBackend, WireConfig};
use cohort::runtime::{BusEvent, Episode, EpisodeConfig, EventKind, Scheduling, Task, ToolRegistry, SYSTEM};
use cohort::scaffold::{load_team, ScaffoldStore, StoreOptions};
use cohort::trace::{import_annotated, load, to_jsonl, ExperienceStore};
use cohort::{Clock, Cost, Evaluator, Experience, FakeClock, ModelGateway, SystemClock, TeamScaffold};

use crate::error::{CliError, EXIT_OK, EXIT_RUNTIME, EXIT_SCAFFOLD};
use crate::{
    AttributeArgs, BackendArgs, BudgetArgs, Cli, Command, EpisodeArgs, EvolveArgs, InspectArgs, ReplayArgs, RunArgs,
    ValidateArgs,
};

type Outcome = Result<u8, CliError>;

pub fn dispatch(cli: &Cli) -> Outcome {
    let clock: Arc<dyn Clock> = if cli.fixed_clock {
        Arc::new(FakeClock::fixed())
    } else {
        Arc::new(SystemClock)
    };
    match &cli.command {
        Command::Run(a) => run(a, clock),
        Command::Evolve(a) => evolve(a, clock),
        Command::Attribute(a) => attribute_traces(a, clock),
        Command::Inspect(a) => inspect(a),
        // Replays are only comparable under a pinned clock.
        Command::Replay(a) => replay(a, Arc::new(FakeClock::fixed())),
        Command::Validate(a) => validate(a),
    }
}

fn read_text(path: &Path, what: &str) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {what} {}: {e}", path.display())))
}

fn read_yaml<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, CliError> {
    serde_yaml::from_str(&read_text(path, what)?)
        .map_err(|e| CliError::usage(format!("invalid {what} {}: {e}", path.display())))
}

fn budget_limits(args: &BudgetArgs) -> Result<BudgetLimits, CliError> {
    let profiles = match &args.budgets {
        Some(path) => BudgetProfiles::from_yaml(&read_text(path, "budget file")?)?,
        None => BudgetProfiles::builtin(),
    };
    let mut limits = profiles.get(&args.budget)?;
    if let Some(s) = args.max_seconds {
        limits.max_seconds = s;
    }
    if let Some(m) = args.max_messages {
        limits.max_messages = m;
    }
    if let Some(c) = args.max_cost {
        limits.max_cost = c;
    }
    limits.validate()?;
    Ok(limits)
}

/// Scripted sources: a file, or a directory holding `<key>.script` files.
enum Backend {
    Wire(WireConfig),
    Scripted(PathBuf),
}

impl Backend {
    fn parse(spec: &str) -> Result<Self, CliError> {
        if spec == "wire" {
            return WireConfig::from_env()
                .map(Backend::Wire)
                .ok_or_else(|| CliError::usage("the wire backend needs COHORT_ENDPOINT"));
        }
        match spec.strip_prefix("scripted:") {
            Some(path) if !path.is_empty() => Ok(Backend::Scripted(PathBuf::from(path))),
            _ => Err(CliError::usage(format!(
                "unknown backend `{spec}` (expected `wire` or `scripted:<path>`)"
            ))),
        }
    }

    fn script_path(&self, key: &str) -> Option<PathBuf> {
        match self {
            Backend::Scripted(p) if p.is_dir() => Some(p.join(format!("{key}.script"))),
            Backend::Scripted(p) => Some(p.clone()),
            Backend::Wire(_) => None,
        }
    }

    /// A gateway with fresh backend state. `key` picks the script file when
    /// the scripted source is a directory.
    fn gateway(&self, args: &BackendArgs, clock: &Arc<dyn Clock>, models: &[String], key: &str) -> Result<ModelGateway, CliError> {
        let mut costs = match &args.prices {
            Some(path) => CostModel::from_yaml(&read_text(path, "price file")?)
                .map_err(|e| CliError::usage(format!("invalid price file: {e}")))?,
            None => CostModel::default(),
        };
        let backend: Arc<dyn ModelBackend> = match self {
            Backend::Wire(cfg) => {
                if let Some(m) = models.iter().find(|m| costs.price(m).is_err()) {
                    return Err(CliError::usage(format!("no price for model `{m}`; pass --prices")));
                }
                Arc::new(WireBackend::new(cfg.clone()))
            }
            Backend::Scripted(_) => {
                let path = self.script_path(key).expect("scripted");
                let script = Script::parse(&read_text(&path, "script")?)
                    .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
                for m in models {
                    if costs.price(m).is_err() {
                        costs.insert(m.clone(), Price::per_million(0.0, 0.0));
                    }
                }
                Arc::new(ScriptedBackend::new(script, clock.clone()))
            }
        };
        Ok(ModelGateway::new(backend, costs, clock.clone()))
    }
}

fn evaluator(spec: &str) -> Result<Box<dyn Evaluator>, CliError> {
    if let Some(needle) = spec.strip_prefix("contains:") {
        return Ok(Box::new(ScriptedEvaluator::passes_if_contains(needle)));
    }
    if let Some(exact) = spec.strip_prefix("exact:") {
        return Ok(Box::new(
            ScriptedEvaluator::new().rule(Matcher::Exact(exact.to_string()), cohort::Score::pass()),
        ));
    }
    if let Some(cmd) = spec.strip_prefix("cmd:") {
        let mut parts = cmd.split_whitespace().map(str::to_string);
        let program = parts.next().ok_or_else(|| CliError::usage("`cmd:` needs a program"))?;
        return Ok(Box::new(CommandEvaluator {
            program,
            args: parts.collect(),
        }));
    }
    Err(CliError::usage(format!(
        "unknown evaluator `{spec}` (expected contains:, exact: or cmd:)"
    )))
}

fn backbones(team: &TeamScaffold) -> Vec<String> {
    let mut models: Vec<String> = team.pool.iter().map(|a| a.config.backbone.clone()).collect();
    models.sort();
    models.dedup();
    models
}

fn episode_config(args: &EpisodeArgs, episode_id: Option<String>) -> EpisodeConfig {
    EpisodeConfig {
        scheduling: if args.concurrent {
            Scheduling::Concurrent
        } else {
            Scheduling::Deterministic
        },
        episode_id,
        ..EpisodeConfig::default()
    }
}

fn run_episode(
    args: &EpisodeArgs,
    team: TeamScaffold,
    task: Task,
    clock: &Arc<dyn Clock>,
    episode_id: Option<String>,
) -> Result<Experience, CliError> {
    let limits = budget_limits(&args.budget)?;
    let judge = evaluator(&args.evaluator)?;
    let backend = Backend::parse(&args.backend.backend)?;
    let gw = backend.gateway(&args.backend, clock, &backbones(&team), &task.id)?;
    let episode = Episode::new(Arc::new(team), task, &limits, gw, episode_config(args, episode_id))?;
    Ok(episode.run(judge.as_ref())?)
}

fn outcome_line(e: &Experience) -> String {
    let o = e.outcome();
    let end = serde_json::to_value(&o.end).unwrap_or(Value::Null);
    format!(
        "episode {}: {} by {}, score {} ({}), cost {}",
        e.episode_id(),
        end["kind"].as_str().unwrap_or("?"),
        o.finalized_by,
        o.score.value,
        if o.score.passed { "passed" } else { "failed" },
        e.total_cost()
    )
}

fn run(args: &RunArgs, clock: Arc<dyn Clock>) -> Outcome {
    let team = load_team(&args.episode.team)?;
    let task: Task = read_yaml(&args.task, "task file")?;
    let e = run_episode(&args.episode, team, task, &clock, None)?;
    let store = ExperienceStore::open(&args.out)?;
    let path = store.put(&e)?;
    println!("{}", outcome_line(&e));
    println!("trace {}", path.display());
    Ok(EXIT_OK)
}

fn evolve(args: &EvolveArgs, clock: Arc<dyn Clock>) -> Outcome {
    let store = ScaffoldStore::open(&args.episode.team, StoreOptions::default())?;
    let tasks: Vec<Task> = read_yaml(&args.tasks, "task list")?;
    let limits = budget_limits(&args.episode.budget)?;
    let judge = evaluator(&args.episode.evaluator)?;
    let mut config = EvolutionConfig {
        model: args.model.clone(),
        budget: args.evolution_budget.map(Cost::from_dollars),
        ..EvolutionConfig::default()
    };
    if let Some(cap) = args.reflection_cap {
        config.reflection_cost_cap = Cost::from_dollars(cap);
    }
    if let Some(secs) = args.phase_timeout {
        config.phase_timeout = std::time::Duration::from_secs(secs);
    }
    let mut models = backbones(&store.snapshot());
    models.extend(args.model.clone());
    let backend = Backend::parse(&args.episode.backend.backend)?;
    let gw = backend.gateway(&args.episode.backend, &clock, &models, "curriculum")?;
    let ctx = EvolutionContext {
        gateway: &gw,
        evaluator: judge.as_ref(),
        limits,
        episode: episode_config(&args.episode, None),
        config,
    };
    let experiences = ExperienceStore::open(args.out.join("experiences"))?;
    let audit = args.out.join("audit.jsonl");
    let records = run_evolution(&store, &tasks, &ctx, &experiences, &audit, args.resume)?;
    for r in &records {
        let result = match (&r.error, r.passed) {
            (Some(e), _) => format!("error: {e}"),
            (None, Some(true)) => "passed".into(),
            _ => "failed".into(),
        };
        let gate = match &r.gate {
            Some(g) if !g.accepted => format!(", gate rejected: {}", g.failed().join(", ")),
            _ => String::new(),
        };
        println!(
            "{}: {result}, v{} -> v{}{}{gate}, evolution cost {}",
            r.episode_id,
            r.version_before,
            r.version_after,
            if r.committed { " committed" } else { "" },
            r.evolution_cost
        );
    }
    println!("audit {}", audit.display());
    Ok(EXIT_OK)
}

fn attribute_traces(args: &AttributeArgs, clock: Arc<dyn Clock>) -> Outcome {
    let scheme: Scheme = args.scheme.parse().map_err(CliError::usage)?;
    let provisional = match args.provisional.as_str() {
        "consensus" => ProvisionalSource::Consensus,
        "global" => ProvisionalSource::GlobalPass,
        other => return Err(CliError::usage(format!("unknown provisional source `{other}`"))),
    };
    let cfg = SchemeConfig {
        model: args.model.clone(),
        alpha: args.alpha,
        rounds: args.rounds,
        provisional,
    };
    cfg.validate()?;
    let backend = Backend::parse(&args.backend.backend)?;
    let mut rows = Vec::new();
    let mut details = Vec::new();
    for path in &args.traces {
        let trace = import_annotated(path)?;
        let gw = backend.gateway(&args.backend, &clock, std::slice::from_ref(&args.model), &trace.id)?;
        let a = attribute(scheme, &trace.steps, &gw, &cfg)?;
        let truth = Verdict::new(trace.ground_truth.0.clone(), trace.ground_truth.1);
        details.push(json!({
            "trace": trace.id,
            "bucket": trace.bucket().label(),
            "tokens": trace.token_estimate,
            "verdict": a.verdict,
            "truth": truth,
            "fallback": a.fallback,
            "calls": a.calls,
            "cost": a.cost,
        }));
        rows.push((trace.bucket(), a.verdict, truth));
    }
    let report = bucket_report(&rows);
    if args.json {
        let out = json!({"scheme": scheme.as_str(), "alpha": args.alpha, "rounds": args.rounds, "traces": details, "report": report});
        println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
        return Ok(EXIT_OK);
    }
    for ((_, v, t), d) in rows.iter().zip(&details) {
        let mark = if v == t {
            "exact"
        } else if v.mistake_agent == t.mistake_agent {
            "agent"
        } else {
            "miss"
        };
        println!(
            "{} [{}]: verdict {}@{} truth {}@{} {mark}",
            d["trace"].as_str().unwrap_or("?"),
            d["bucket"].as_str().unwrap_or("?"),
            v.mistake_agent,
            v.mistake_step,
            t.mistake_agent,
            t.mistake_step
        );
    }
    println!("scheme {} alpha {} rounds {}", scheme.as_str(), args.alpha, args.rounds);
    println!("{:<8} {:>4} {:>7} {:>7}", "split", "n", "agent", "step");
    let labelled = report
        .buckets
        .iter()
        .map(|(b, a)| (b.label(), a))
        .chain(std::iter::once(("overall", &report.overall)));
    for (label, a) in labelled {
        println!("{label:<8} {:>4} {:>7.3} {:>7.3}", a.n, a.agent_accuracy, a.step_accuracy);
    }
    Ok(EXIT_OK)
}

fn clip(s: &str, n: usize) -> String {
    let one_line = s.replace('\n', " ");
    if one_line.chars().count() <= n {
        one_line
    } else {
        one_line.chars().take(n).collect::<String>() + "..."
    }
}

fn describe(ev: &BusEvent) -> String {
    let p = &ev.payload;
    let s = |k: &str| p.get(k).and_then(Value::as_str).unwrap_or("");
    match ev.kind {
        EventKind::Message => format!("-> {}: {}", ev.recipient.as_deref().unwrap_or("?"), clip(s("body"), 60)),
        EventKind::ToolCall => format!("{}({})", s("name"), clip(&p.get("arguments").map(Value::to_string).unwrap_or_default(), 50)),
        EventKind::ToolResult => format!(
            "{} {}: {}",
            s("name"),
            if p["ok"].as_bool().unwrap_or(false) { "ok" } else { "failed" },
            clip(s("content"), 50)
        ),
        EventKind::Lifecycle => {
            let target = ev.recipient.as_deref().map(|r| format!(" {r}")).unwrap_or_default();
            format!("{}{target}", s("action"))
        }
        EventKind::ModelCall => format!(
            "step {}{}",
            p["step"],
            if p["forced"].as_bool().unwrap_or(false) { " (forced, no tools)" } else { "" }
        ),
        EventKind::ModelResult => clip(s("text"), 60),
    }
}

fn inspect(args: &InspectArgs) -> Outcome {
    let e = load(&args.trace)?;
    let o = e.outcome();
    println!("episode {} (task {}, team v{})", e.episode_id(), e.task().id, e.team_version());
    println!("{}", outcome_line(&e));
    let mut lanes: Vec<String> = vec![SYSTEM.to_string()];
    lanes.extend(e.trajectory().agents().iter().cloned());
    let width = lanes.iter().map(String::len).max().unwrap_or(1).max(3);
    let header: Vec<String> = lanes.iter().map(|l| format!("{l:<width$}")).collect();
    println!("{:>5}  {}", "seq", header.join(" "));
    for ev in e.trajectory().events() {
        let cells: Vec<String> = lanes
            .iter()
            .map(|l| {
                let mark = if ev.actor == *l {
                    "*"
                } else if ev.recipient.as_deref() == Some(l.as_str()) {
                    ">"
                } else {
                    "|"
                };
                format!("{mark:<width$}")
            })
            .collect();
        println!("{:>5}  {}  {} {}: {}", ev.seq, cells.join(" "), ev.actor, ev.kind.as_str(), describe(ev));
    }
    println!("deliverable: {}", clip(&o.deliverable, 200));
    Ok(EXIT_OK)
}

fn normalized(text: &str, blank_ts: bool) -> Vec<String> {
    text.lines()
        .map(|line| {
            if !blank_ts {
                return line.to_string();
            }
            match serde_json::from_str::<Value>(line) {
                Ok(mut v) => {
                    if let Some(ts) = v.get_mut("ts") {
                        *ts = json!(0);
                    }
                    v.to_string()
                }
                Err(_) => line.to_string(),
            }
        })
        .collect()
}

fn replay(args: &ReplayArgs, clock: Arc<dyn Clock>) -> Outcome {
    let recorded = load(&args.trace)?;
    if !args.episode.backend.backend.starts_with("scripted:") {
        return Err(CliError::usage("replay needs a scripted backend"));
    }
    let team = load_team(&args.episode.team)?;
    if team.version != recorded.team_version() {
        return Err(CliError::new(
            EXIT_SCAFFOLD,
            format!(
                "team is at v{} but the trace was recorded at v{}",
                team.version,
                recorded.team_version()
            ),
        ));
    }
    let again = run_episode(
        &args.episode,
        team,
        recorded.task().clone(),
        &clock,
        Some(recorded.episode_id().to_string()),
    )?;
    let (a, b) = (
        normalized(&to_jsonl(&recorded), args.ignore_timestamps),
        normalized(&to_jsonl(&again), args.ignore_timestamps),
    );
    let first_diff = (0..a.len().max(b.len())).find(|&i| a.get(i) != b.get(i));
    match first_diff {
        None => {
            println!("replay identical: {} lines", a.len());
            Ok(EXIT_OK)
        }
        Some(i) => {
            println!("replay diverged at line {}", i + 1);
            println!("- {}", a.get(i).map(String::as_str).unwrap_or("<missing>"));
            println!("+ {}", b.get(i).map(String::as_str).unwrap_or("<missing>"));
            Ok(EXIT_RUNTIME)
        }
    }
}

fn validate(args: &ValidateArgs) -> Outcome {
    let mut tools = ToolRegistry::default().names();
    tools.extend(args.tools.iter().cloned());
    let report = validate_scaffold(&args.team, &tools)?;
    for check in &report.checks {
        println!("{}: {}", check.name, if check.passed { "PASS" } else { "FAIL" });
        for p in &check.problems {
            println!("  - {p}");
        }
    }
    Ok(if report.accepted { EXIT_OK } else { EXIT_SCAFFOLD })
}
