use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cohort::scaffold::{save_team, AgentConfig, AgentScaffold, TeamScaffold};
use cohort::trace::{AnnotatedTrace, StepRecord};

fn cohort(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cohort"))
        .args(args)
        .env_remove("COHORT_ENDPOINT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn team(names: &[&str]) -> TeamScaffold {
    TeamScaffold {
        version: 0,
        entry: names[0].to_string(),
        constitution: "Deliver correct work.".into(),
        organization: String::new(),
        pool: names
            .iter()
            .map(|n| AgentScaffold::new(*n, format!("# {}\nYou do the {n} part.", n.to_uppercase()), AgentConfig::new("scripted")))
            .collect(),
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        save_team(&team(&["lead", "checker"]), &root.join("team")).unwrap();
        fs::write(root.join("task.yaml"), "id: t1\ntext: Add 20 and 22.\n").unwrap();
        Self { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn write(&self, rel: &str, text: &str) -> PathBuf {
        let p = self.path(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(&p, text).unwrap();
        p
    }
}

const HELLO: &str = "\
=== lead 1
usage 100 10
call start_agent {\"name\": \"checker\", \"brief\": \"verify\"}
call send_message {\"to\": \"checker\", \"body\": \"is 42 right?\"}
=== checker 1
call send_message {\"to\": \"lead\", \"body\": \"yes\"}
=== lead 2
text waiting
=== lead 3
call finalize {\"deliverable\": \"42\"}
=== * *
text idle
";

fn run_hello(f: &Fixture, out: &str) -> Output {
    let script = f.write("hello.script", HELLO);
    cohort(&[
        "--fixed-clock",
        "run",
        "--team",
        s(&f.path("team")),
        "--task",
        s(&f.path("task.yaml")),
        "--backend",
        &format!("scripted:{}", s(&script)),
        "--evaluator",
        "contains:42",
        "--out",
        s(&f.path(out)),
    ])
}

#[test]
fn run_writes_a_reproducible_trace() {
    let f = Fixture::new();
    let first = run_hello(&f, "a");
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert!(stdout(&first).contains("finalized by lead"), "{}", stdout(&first));
    let trace = f.path("a/t1.v0.jsonl");
    assert!(trace.is_file());
    let second = run_hello(&f, "b");
    assert_eq!(code(&second), 0);
    assert_eq!(fs::read(&trace).unwrap(), fs::read(f.path("b/t1.v0.jsonl")).unwrap());
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let f = Fixture::new();
    let script = f.write("hello.script", HELLO);
    let backend = format!("scripted:{}", s(&script));
    let (task, out_dir) = (f.path("task.yaml"), f.path("out"));
    let run = |team: &Path, extra: &[&str]| {
        let mut args = vec![
            "--fixed-clock",
            "run",
            "--team",
            s(team),
            "--task",
            s(&task),
            "--backend",
            &backend,
            "--evaluator",
            "contains:42",
            "--out",
            s(&out_dir),
        ];
        args.extend_from_slice(extra);
        cohort(&args)
    };
    let missing = run(&f.path("nowhere"), &[]);
    assert_eq!(code(&missing), 2);
    assert!(stderr(&missing).contains("missing team manifest"), "{}", stderr(&missing));
    assert_eq!(code(&run(&f.path("team"), &["--budget", "nope"])), 64);
    assert_eq!(code(&run(&f.path("team"), &["--max-cost", "-1"])), 64);
    assert_eq!(code(&cohort(&["run"])), 64);

    // A backend that never answers exhausts the retries.
    let failing = f.write("fail.script", "=== lead 1\nfail 9 transient\ntext never\n");
    let out = cohort(&[
        "--fixed-clock",
        "run",
        "--team",
        s(&f.path("team")),
        "--task",
        s(&f.path("task.yaml")),
        "--backend",
        &format!("scripted:{}", s(&failing)),
        "--evaluator",
        "contains:42",
        "--out",
        s(&f.path("out")),
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));

    // The wire backend needs an endpoint.
    let wire = cohort(&[
        "run",
        "--team",
        s(&f.path("team")),
        "--task",
        s(&f.path("task.yaml")),
        "--evaluator",
        "contains:42",
    ]);
    assert_eq!(code(&wire), 64);
}

#[test]
fn help_lists_the_exit_codes() {
    let out = cohort(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for line in ["Exit codes:", "  2   scaffold", "  64  bad arguments"] {
        assert!(text.contains(line), "{text}");
    }
    for cmd in ["run", "evolve", "attribute", "inspect", "replay", "validate"] {
        assert!(text.contains(cmd));
    }
}

#[test]
fn inspect_prints_lanes_in_seq_order() {
    let f = Fixture::new();
    assert_eq!(code(&run_hello(&f, "a")), 0);
    let out = cohort(&["inspect", s(&f.path("a/t1.v0.jsonl"))]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let header = text.lines().find(|l| l.trim_start().starts_with("seq")).unwrap();
    assert!(header.contains("system") && header.contains("checker") && header.contains("lead"));
    let seqs: Vec<u64> = text
        .lines()
        .skip_while(|l| !l.trim_start().starts_with("seq"))
        .skip(1)
        .filter_map(|l| l.split_whitespace().next()?.parse().ok())
        .collect();
    assert!(!seqs.is_empty());
    assert_eq!(seqs, (0..seqs.len() as u64).collect::<Vec<_>>());
    assert!(text.contains("-> checker: is 42 right?"));

    let corrupt = f.write("bad.jsonl", "{\"not\": \"a trace\"}\n");
    let out = cohort(&["inspect", s(&corrupt)]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("schema"), "{}", stderr(&out));
}

#[test]
fn replay_matches_a_deterministic_episode_and_reports_divergence() {
    let f = Fixture::new();
    assert_eq!(code(&run_hello(&f, "a")), 0);
    let trace = f.path("a/t1.v0.jsonl");
    let replay = |script: &Path| {
        cohort(&[
            "replay",
            s(&trace),
            "--team",
            s(&f.path("team")),
            "--backend",
            &format!("scripted:{}", s(script)),
            "--evaluator",
            "contains:42",
        ])
    };
    let same = replay(&f.path("hello.script"));
    assert_eq!(code(&same), 0, "{}{}", stdout(&same), stderr(&same));
    assert!(stdout(&same).contains("replay identical"));

    let changed = f.write("changed.script", &HELLO.replace("\"yes\"", "\"no\""));
    let diff = replay(&changed);
    assert_eq!(code(&diff), 1);
    assert!(stdout(&diff).contains("replay diverged at line"), "{}", stdout(&diff));
}

const CURRICULUM: &str = "\
=== lead 1
when Double-check
call finalize {\"deliverable\": \"42\"}
=== lead 1
call finalize {\"deliverable\": \"41\"}
=== lead#l1 1
when Task t1:
text {\"patches\": [\"Use the web_searchx tool first.\"], \"summary\": \"tried\"}
=== lead#l1 1
when (failed)
text {\"patches\": [\"Double-check the arithmetic.\"], \"summary\": \"slipped\"}
=== lead#l1 1
text {\"summary\": \"fine\"}
=== team#l3 1
text {}
";

fn evolve(f: &Fixture, resume: bool) -> Output {
    let script = f.write("curriculum.script", CURRICULUM);
    let tasks = f.write(
        "tasks.yaml",
        "- {id: t1, text: Add 20 and 22.}\n- {id: t2, text: Add 20 and 22 again.}\n- {id: t3, text: Once more.}\n",
    );
    let mut args = vec![
        "--fixed-clock".to_string(),
        "evolve".into(),
        "--team".into(),
        s(&f.path("team")).into(),
        "--tasks".into(),
        s(&tasks).into(),
        "--backend".into(),
        format!("scripted:{}", s(&script)),
        "--evaluator".into(),
        "contains:42".into(),
        "--out".into(),
        s(&f.path("out")).into(),
    ];
    if resume {
        args.push("--resume".into());
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    cohort(&args)
}

#[test]
fn evolve_audits_every_episode_and_resumes() {
    let f = Fixture::new();
    let out = evolve(&f, false);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let audit = fs::read_to_string(f.path("out/audit.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = audit.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 3);
    // The first reflection names a tool that does not exist; the gate says so.
    let first = &records[0];
    assert_eq!(first["committed"], false);
    let checks = first["gate"]["checks"].as_array().unwrap();
    let tools = checks.iter().find(|c| c["name"] == "tool_availability").unwrap();
    assert_eq!(tools["passed"], false);
    assert!(tools["problems"][0].as_str().unwrap().contains("web_searchx"));
    assert!(stdout(&out).contains("gate rejected: tool_availability"), "{}", stdout(&out));
    // The second failure commits a patch and the third task passes.
    assert_eq!(records[1]["committed"], true);
    assert_eq!(records[2]["passed"], true);
    assert_eq!(records[2]["version_before"], 1);

    // Resuming a finished curriculum leaves the audit log as it was.
    let again = evolve(&f, true);
    assert_eq!(code(&again), 0, "{}", stderr(&again));
    assert_eq!(fs::read_to_string(f.path("out/audit.jsonl")).unwrap(), audit);

    // Resuming after losing the last audit entry redoes only that episode.
    let truncated: String = audit.lines().take(2).map(|l| format!("{l}\n")).collect();
    fs::write(f.path("out/audit.jsonl"), truncated).unwrap();
    let resumed = evolve(&f, true);
    assert_eq!(code(&resumed), 0, "{}", stderr(&resumed));
    let after = fs::read_to_string(f.path("out/audit.jsonl")).unwrap();
    let after: Vec<serde_json::Value> = after.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(after[..2], records[..2]);
    let mut redone = after[2].clone();
    assert_eq!(redone["notes"][0], "experience recovered from the store");
    redone.as_object_mut().unwrap().remove("notes");
    assert_eq!(redone, records[2]);
}

fn annotated(f: &Fixture, id: &str, agents: &[&str], truth: (&str, u32)) -> PathBuf {
    let steps = agents
        .iter()
        .enumerate()
        .map(|(i, a)| StepRecord {
            index: i as u32 + 1,
            agent: a.to_string(),
            input: format!("input {}", i + 1),
            output: format!("output {}", i + 1),
        })
        .collect();
    let trace = AnnotatedTrace::new(id, steps, (truth.0.to_string(), truth.1));
    f.write(&format!("traces/{id}.jsonl"), &trace.to_jsonl())
}

#[test]
fn attribute_scores_each_scheme() {
    let f = Fixture::new();
    // Steps: A 1, B 2, A 3, B 4. The mistake is A's second step (global 3).
    let one = annotated(&f, "one", &["A", "B", "A", "B"], ("A", 3));
    let two = annotated(&f, "two", &["A", "B", "A", "B"], ("B", 2));
    f.write(
        "scripts/one.script",
        "=== global 1\ntext {\"agent\": \"B\", \"step\": 4}\n\
         === analyzer:A 1\ntext {\"summary\": \"A\", \"suspect_agent\": \"B\", \"suspect_step\": 4}\n\
         === analyzer:B 1\ntext {\"summary\": \"B\", \"suspect_agent\": \"B\", \"suspect_step\": 4}\n\
         === analyzer:A 2\ntext {\"i_erred\": true, \"my_step\": 2, \"confidence\": 0.5, \"disagree\": true}\n\
         === analyzer:B 2\ntext {\"i_erred\": true, \"my_step\": 2, \"confidence\": 0.8}\n",
    );
    f.write(
        "scripts/two.script",
        "=== global 1\ntext {\"agent\": \"B\", \"step\": 2}\n\
         === analyzer:A 1\ntext {\"summary\": \"A\"}\n\
         === analyzer:B 1\ntext {\"summary\": \"B\"}\n\
         === analyzer:A 2\ntext {\"i_erred\": false, \"confidence\": 0.9}\n\
         === analyzer:B 2\ntext {\"i_erred\": true, \"my_step\": 1, \"confidence\": 0.7}\n",
    );
    let backend = format!("scripted:{}", s(&f.path("scripts")));
    let attribute = |scheme: &str, alpha: &str| {
        let out = cohort(&[
            "attribute",
            s(&one),
            s(&two),
            "--scheme",
            scheme,
            "--alpha",
            alpha,
            "--model",
            "judge",
            "--backend",
            &backend,
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        stdout(&out)
    };
    // With alpha 1, A's disagreement doubles its 0.5 to 1.0 and beats B's 0.8.
    let collab = attribute("collab", "1");
    assert!(collab.contains("one [<=128K]: verdict A@3 truth A@3 exact"), "{collab}");
    assert!(collab.contains("two [<=128K]: verdict B@2 truth B@2 exact"), "{collab}");
    assert!(collab.lines().any(|l| l.starts_with("overall") && l.contains("1.000   1.000")), "{collab}");
    assert!(collab.lines().any(|l| l.starts_with(">128K") && l.split_whitespace().nth(1) == Some("0")));
    // Confidence alone picks B.
    let plain = attribute("collab", "0");
    assert!(plain.contains("one [<=128K]: verdict B@4 truth A@3 miss"), "{plain}");
    let global = attribute("global", "1");
    assert!(global.contains("one [<=128K]: verdict B@4"), "{global}");
    let local = attribute("local", "1");
    assert!(local.contains("scheme local"), "{local}");

    let bad = cohort(&["attribute", s(&one), "--scheme", "vote", "--model", "m", "--backend", &backend]);
    assert_eq!(code(&bad), 64);
    let corrupt = f.write("traces/bad.jsonl", "not json\n");
    let out = cohort(&["attribute", s(&corrupt), "--model", "m", "--backend", &backend]);
    assert_eq!(code(&out), 3);
}

#[test]
fn validate_reports_each_check() {
    let f = Fixture::new();
    let ok = cohort(&["validate", "--team", s(&f.path("team"))]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert!(stdout(&ok).contains("tool_availability: PASS"));

    let config = f.path("team/agents/checker/config.yaml");
    let text = fs::read_to_string(&config).unwrap();
    fs::write(&config, text.replace("allowed_tools: []", "allowed_tools:\n- web_searchx")).unwrap();
    let out = cohort(&["validate", "--team", s(&f.path("team"))]);
    assert_eq!(code(&out), 2);
    assert!(stdout(&out).contains("tool_availability: FAIL"), "{}", stdout(&out));
    assert!(stdout(&out).contains("web_searchx"));
    let allowed = cohort(&["validate", "--team", s(&f.path("team")), "--tool", "web_searchx"]);
    assert_eq!(code(&allowed), 0);

    let manifest = f.path("team/team.yaml");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replace("- checker", "- checker\n- checker")).unwrap();
    let dup = cohort(&["validate", "--team", s(&f.path("team"))]);
    assert_eq!(code(&dup), 2);
    assert!(stdout(&dup).contains("role_consistency: FAIL"), "{}", stdout(&dup));

    assert_eq!(code(&cohort(&["validate", "--team", s(&f.path("nowhere"))])), 2);
}
