mod common;

use std::sync::Arc;

use cohort::attribution::{
    aggregate_votes, attribute_collaborative, attribute_global, attribute_local, bucket_report, score,
    EmptyPolicy, ProvisionalSource, SchemeConfig, StepIndex, Submission, Verdict,
};
use cohort::gateway::{ModelGateway, Script, ScriptedBackend};
use cohort::trace::{import_annotated, StepRecord, TokenBucket};
use cohort::FakeClock;
use common::oracle::{oracle_verdict, RawSub};
use common::suite::attribution_suite;
use common::{costs, MODEL};
use num_rational::Ratio;
use proptest::prelude::*;

fn steps_of(agents: &[String]) -> Vec<StepRecord> {
    agents
        .iter()
        .enumerate()
        .map(|(i, a)| StepRecord {
            index: i as u32 + 1,
            agent: a.clone(),
            input: format!("input {}", i + 1),
            output: format!("output {}", i + 1),
        })
        .collect()
}

fn gw(src: &str) -> (ModelGateway, Arc<ScriptedBackend>) {
    let clock: Arc<dyn cohort::Clock> = Arc::new(FakeClock::fixed());
    let backend = Arc::new(ScriptedBackend::new(Script::parse(src).unwrap(), clock.clone()));
    (ModelGateway::new(backend.clone(), costs(), clock), backend)
}

fn cfg() -> SchemeConfig {
    SchemeConfig::new(MODEL)
}

const NAMES: [&str; 5] = ["alpha", "bravo", "charlie", "delta", "echo"];

fn trace_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(0..4usize, 1..25).prop_map(|v| v.into_iter().map(|i| NAMES[i].to_string()).collect())
}

fn subs_strategy() -> impl Strategy<Value = Vec<RawSub>> {
    prop::collection::vec(
        (0..5usize, any::<bool>(), 0..12u32, 0..=100i64, any::<bool>()),
        1..=8,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(a, i_erred, my_step, hundredths, disagree)| RawSub {
                analyzer: NAMES[a].to_string(),
                i_erred,
                my_step,
                hundredths,
                disagree,
            })
            .collect()
    })
}

fn to_subs(raw: &[RawSub]) -> Vec<Submission> {
    raw.iter()
        .map(|r| Submission {
            analyzer: r.analyzer.clone(),
            i_erred: r.i_erred,
            my_step: r.my_step,
            confidence: r.hundredths as f64 / 100.0,
            disagree: r.disagree,
        })
        .collect()
}

fn alphas() -> [(f64, Ratio<i64>); 3] {
    [(0.0, Ratio::new(0, 1)), (0.5, Ratio::new(1, 2)), (1.0, Ratio::new(1, 1))]
}

proptest! {
    #[test]
    fn vote_matches_exact_oracle(agents in trace_strategy(), raw in subs_strategy()) {
        let index = StepIndex::new(&steps_of(&agents)).unwrap();
        let subs = to_subs(&raw);
        for (alpha, exact) in alphas() {
            let got = aggregate_votes(&subs, alpha, &index).verdict;
            let (agent, step) = oracle_verdict(&agents, &raw, exact);
            prop_assert_eq!(got, Verdict::new(agent, step), "alpha {}", alpha);
        }
    }

    #[test]
    fn verdict_always_names_an_existing_step(agents in trace_strategy(), raw in subs_strategy()) {
        let index = StepIndex::new(&steps_of(&agents)).unwrap();
        let v = aggregate_votes(&to_subs(&raw), 1.0, &index).verdict;
        prop_assert!(v.mistake_step >= 1 && v.mistake_step as usize <= agents.len());
        prop_assert_eq!(&agents[v.mistake_step as usize - 1], &v.mistake_agent);
    }

    #[test]
    fn raising_the_leader_keeps_it_winning(
        agents in trace_strategy(),
        raw in subs_strategy(),
        bump in 0.0..1.0f64,
    ) {
        let index = StepIndex::new(&steps_of(&agents)).unwrap();
        let mut subs = to_subs(&raw);
        let tally = aggregate_votes(&subs, 1.0, &index);
        prop_assume!(tally.fallback.is_none());
        let leader = tally.verdict.clone();
        let i = subs
            .iter()
            .position(|s| s.i_erred
                && s.analyzer == leader.mistake_agent
                && index.global(&s.analyzer, s.my_step) == Some(leader.mistake_step))
            .unwrap();
        subs[i].confidence += (1.0 - subs[i].confidence) * bump;
        prop_assert_eq!(aggregate_votes(&subs, 1.0, &index).verdict, leader);
    }

    #[test]
    fn recorded_weight_is_c_times_one_plus_alpha_r(
        hundredths in 0..=100i64,
        disagree in any::<bool>(),
        alpha in prop::sample::select(vec![0.0, 0.5, 1.0, 2.0]),
    ) {
        let index = StepIndex::new(&steps_of(&["alpha".to_string()])).unwrap();
        let mut s = Submission::accuse("alpha", 1, hundredths as f64 / 100.0);
        s.disagree = disagree;
        let tally = aggregate_votes(&[s.clone()], alpha, &index);
        let r = if disagree { 1.0 } else { 0.0 };
        prop_assert_eq!(tally.totals[0].1, s.confidence * (1.0 + alpha * r));
    }

    #[test]
    fn single_agent_collaborative_equals_local(
        erred in any::<bool>(),
        my_step in 1..4u32,
        hundredths in 0..=100i64,
        disagree in any::<bool>(),
    ) {
        let reply = format!(
            "{{\"i_erred\": {erred}, \"my_step\": {my_step}, \"confidence\": {}, \"disagree\": {disagree}}}",
            hundredths as f64 / 100.0
        );
        let script = format!("=== analyzer:solo *\ntext {reply}\n");
        let steps = steps_of(&vec!["solo".to_string(); 3]);
        let (g1, _) = gw(&script);
        let (g2, _) = gw(&script);
        let local = attribute_local(&steps, &g1, &cfg()).unwrap();
        let collab = attribute_collaborative(&steps, &g2, &cfg()).unwrap();
        prop_assert_eq!(local.verdict, collab.verdict);
    }
}

fn three_steps_each() -> Vec<StepRecord> {
    // A owns global steps 1, 3, 5; B owns 2, 4, 6, 7.
    steps_of(&["A", "B", "A", "B", "A", "B", "B"].map(String::from))
}

fn local_with(a: &str, b: &str) -> Verdict {
    let src = format!("=== analyzer:A 1\ntext {a}\n=== analyzer:B 1\ntext {b}\n");
    let (g, _) = gw(&src);
    attribute_local(&three_steps_each(), &g, &cfg()).unwrap().verdict
}

#[test]
fn local_single_accusation() {
    let v = local_with(
        r#"{"i_erred": true, "my_step": 3, "confidence": 0.6}"#,
        r#"{"i_erred": false, "confidence": 0.9}"#,
    );
    assert_eq!(v, Verdict::new("A", 5));
}

#[test]
fn local_largest_confidence_wins() {
    let v = local_with(
        r#"{"i_erred": true, "my_step": 3, "confidence": 0.5}"#,
        r#"{"i_erred": true, "my_step": 4, "confidence": 0.8}"#,
    );
    assert_eq!(v, Verdict::new("B", 7));
}

#[test]
fn local_universal_denial_charges_least_confident_denier() {
    let v = local_with(
        r#"{"i_erred": false, "confidence": 0.9}"#,
        r#"{"i_erred": false, "confidence": 0.4}"#,
    );
    assert_eq!(v, Verdict::new("B", 2));
}

#[test]
fn collaborative_disagreement_doubles_weight() {
    let src = r#"
=== analyzer:A 1
text {"summary": "A's check passed", "suspect_agent": "A", "suspect_step": 1}
=== analyzer:B 1
text {"summary": "B's hand-off seemed fine", "suspect_agent": "A", "suspect_step": 1}
=== analyzer:A 2
text {"i_erred": true, "my_step": 1, "confidence": 0.6, "disagree": false}
=== analyzer:B 2
text {"i_erred": true, "my_step": 2, "confidence": 0.4, "disagree": true}
"#;
    let (g, _) = gw(src);
    let a = attribute_collaborative(&three_steps_each(), &g, &cfg()).unwrap();
    assert_eq!(a.provisional, Some(Verdict::new("A", 1)));
    // 0.4 * (1 + 1) = 0.8 beats 0.6.
    assert_eq!(a.verdict, Verdict::new("B", 4));
    let mut alpha0 = cfg();
    alpha0.alpha = 0.0;
    let (g, _) = gw(src);
    assert_eq!(
        attribute_collaborative(&three_steps_each(), &g, &alpha0).unwrap().verdict,
        Verdict::new("A", 1)
    );
}

#[test]
fn collaborative_universal_denial_matches_local_fallback() {
    let src = r#"
=== analyzer:A 1
text nothing to report
=== analyzer:B 1
text nothing to report
=== analyzer:A 2
text {"i_erred": false, "confidence": 0.9, "disagree": false}
=== analyzer:B 2
text {"i_erred": false, "confidence": 0.4, "disagree": false}
"#;
    let (g, _) = gw(src);
    let a = attribute_collaborative(&three_steps_each(), &g, &cfg()).unwrap();
    assert_eq!(a.provisional, None);
    assert_eq!(a.verdict, Verdict::new("B", 2));
    assert!(a.fallback.is_some());
}

#[test]
fn multi_round_exchange_reposts_summaries() {
    let src = r#"
=== analyzer:A 1
text {"summary": "first look A"}
=== analyzer:B 1
text {"summary": "first look B"}
=== analyzer:A 2
text {"summary": "second look A", "suspect_agent": "B", "suspect_step": 2}
=== analyzer:B 2
text {"summary": "second look B", "suspect_agent": "B", "suspect_step": 2}
=== analyzer:A 3
text {"i_erred": false, "confidence": 0.9}
=== analyzer:B 3
text {"i_erred": true, "my_step": 1, "confidence": 0.7}
"#;
    let (g, backend) = gw(src);
    let mut c = cfg();
    c.rounds = 2;
    let a = attribute_collaborative(&three_steps_each(), &g, &c).unwrap();
    assert_eq!(a.verdict, Verdict::new("B", 2));
    assert_eq!(a.provisional, Some(Verdict::new("B", 2)));
    assert_eq!(a.summaries["A"], "second look A");
    assert_eq!(a.calls, 6);
    let second_a = backend
        .requests()
        .into_iter()
        .find(|r| r.agent == "analyzer:A" && r.step == Some(2))
        .unwrap();
    assert!(second_a.messages.last().unwrap().content.contains("- B: first look B"));
}

#[test]
fn global_pass_as_provisional_source() {
    let src = r#"
=== global 1
text {"agent": "B", "step": 6}
=== analyzer:A 1
text {"summary": "fine"}
=== analyzer:B 1
text {"summary": "fine"}
=== analyzer:A 2
text {"i_erred": false, "confidence": 0.5}
=== analyzer:B 2
text {"i_erred": true, "my_step": 3, "confidence": 0.5}
"#;
    let (g, _) = gw(src);
    let mut c = cfg();
    c.provisional = ProvisionalSource::GlobalPass;
    let a = attribute_collaborative(&three_steps_each(), &g, &c).unwrap();
    assert_eq!(a.provisional, Some(Verdict::new("B", 6)));
    assert_eq!(a.calls, 5);
}

#[test]
fn global_prompt_carries_every_step_of_a_long_trace() {
    let agents: Vec<String> = (0..94).map(|i| ["A", "B", "C"][i % 3].to_string()).collect();
    let (g, backend) = gw("=== global 1\ntext {\"agent\": \"C\", \"step\": 93}\n");
    let a = attribute_global(&steps_of(&agents), &g, &cfg()).unwrap();
    assert_eq!(a.verdict, Verdict::new("C", 93));
    let prompt = &backend.requests()[0].messages[1].content;
    for i in 1..=94 {
        assert!(prompt.contains(&format!("[step {i}] ")), "step {i} missing");
        assert!(prompt.contains(&format!("output {i}\n")) || prompt.ends_with(&format!("output {i}")));
    }
    let positions: Vec<usize> = (1..=94).map(|i| prompt.find(&format!("[step {i}] ")).unwrap()).collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn scoring_suite_reports_both_buckets() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = Vec::new();
    for case in attribution_suite() {
        let path = dir.path().join(format!("{}.jsonl", case.trace.id));
        std::fs::write(&path, case.trace.to_jsonl()).unwrap();
        let imported = import_annotated(&path).unwrap();
        assert_eq!(imported, case.trace);
        let (g, _) = gw(&case.script);
        let a = attribute_collaborative(&imported.steps, &g, &cfg()).unwrap();
        let (agent, step) = imported.ground_truth.clone();
        rows.push((imported.bucket(), a.verdict, Verdict::new(agent, step)));
    }
    let report = bucket_report(&rows);
    let long = report.buckets.iter().find(|(b, _)| *b == TokenBucket::Over128K).unwrap();
    assert_eq!(long.1.n, 5);
    assert_eq!(report.overall.n, 20);
    let (v, t): (Vec<_>, Vec<_>) = rows.into_iter().map(|(_, v, t)| (v, t)).unzip();
    assert_eq!(score(&v, &t, EmptyPolicy::Error).unwrap(), report.overall);
}
