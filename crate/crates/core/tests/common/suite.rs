//! Twenty hand-labeled attribution fixtures with scripted analyzer replies.
//!
//! Every trace assigns steps to agents round-robin. Each case scripts what
//! the flattened-trace pass, the isolated analyzers and the exchanging
//! analyzers reply, following five patterns:
//!
//! * short: every scheme finds the mistake
//! * symptom: a long trace where a downstream agent shows the symptom and
//!   blames itself, while the culprit only owns up after reading summaries
//! * denial: nobody self-accuses in isolation
//! * competing: two self-accusations, and the culprit's disagreement with a
//!   wrong provisional verdict decides the vote
//! * hard: every scheme names the wrong step

use cohort::trace::{AnnotatedTrace, StepRecord};

pub struct Case {
    pub trace: AnnotatedTrace,
    pub script: String,
    pub pattern: &'static str,
}

struct Builder {
    id: String,
    agents: Vec<String>,
    len: u32,
    pad: usize,
    truth: (String, u32),
    rules: Vec<String>,
    pattern: &'static str,
}

impl Builder {
    fn new(pattern: &'static str, id: usize, agents: &[&str], len: u32, pad: usize, truth: u32) -> Self {
        let agents: Vec<String> = agents.iter().map(|a| a.to_string()).collect();
        let truth_agent = agents[(truth as usize - 1) % agents.len()].clone();
        Self {
            id: format!("case{id:02}"),
            agents,
            len,
            pad,
            truth: (truth_agent, truth),
            rules: Vec::new(),
            pattern,
        }
    }

    fn agent_of(&self, global: u32) -> &str {
        &self.agents[(global as usize - 1) % self.agents.len()]
    }

    fn local_of(&self, global: u32) -> u32 {
        (global - 1) / self.agents.len() as u32 + 1
    }

    fn culprit(&self) -> String {
        self.truth.0.clone()
    }

    fn rule(mut self, key: &str, when: Option<&str>, text: String) -> Self {
        let mut r = format!("=== {key}\n");
        if let Some(w) = when {
            r.push_str(&format!("when {w}\n"));
        }
        r.push_str(&format!("text {text}\n"));
        self.rules.push(r);
        self
    }

    fn global(self, step: u32) -> Self {
        let agent = self.agent_of(step).to_string();
        self.rule("global 1", None, format!("{{\"agent\": \"{agent}\", \"step\": {step}}}"))
    }

    fn repair(self, step: u32) -> Self {
        let agent = self.agent_of(step).to_string();
        self.rule("global#repair 1", None, format!("{{\"agent\": \"{agent}\", \"step\": {step}}}"))
    }

    fn global_raw(self, key: &str, text: &str) -> Self {
        self.rule(key, None, text.to_string())
    }

    fn submission(&self, step: Option<u32>, conf: f64, disagree: Option<bool>) -> String {
        let tail = disagree.map_or(String::new(), |d| format!(", \"disagree\": {d}"));
        match step {
            Some(g) => format!(
                "{{\"i_erred\": true, \"my_step\": {}, \"confidence\": {conf}{tail}}}",
                self.local_of(g)
            ),
            None => format!("{{\"i_erred\": false, \"confidence\": {conf}{tail}}}"),
        }
    }

    /// Isolated analyzer reply; `step` is the global step it confesses to.
    fn local(self, agent: &str, step: Option<u32>, conf: f64) -> Self {
        if let Some(g) = step {
            assert_eq!(self.agent_of(g), agent, "{}: {agent} does not own step {g}", self.id);
        }
        let text = self.submission(step, conf, None);
        self.rule(&format!("analyzer:{agent} 1"), Some("Decide whether you made"), text)
    }

    fn summary(self, agent: &str, suspect: Option<u32>, note: &str) -> Self {
        let text = match suspect {
            Some(g) => format!(
                "{{\"summary\": \"{note}\", \"suspect_agent\": \"{}\", \"suspect_step\": {g}}}",
                self.agent_of(g)
            ),
            None => format!("{{\"summary\": \"{note}\", \"suspect_agent\": null, \"suspect_step\": null}}"),
        };
        self.rule(&format!("analyzer:{agent} 1"), Some("Post a short summary"), text)
    }

    fn last(self, agent: &str, step: Option<u32>, conf: f64, disagree: bool) -> Self {
        if let Some(g) = step {
            assert_eq!(self.agent_of(g), agent, "{}: {agent} does not own step {g}", self.id);
        }
        let text = self.submission(step, conf, Some(disagree));
        self.rule(&format!("analyzer:{agent} 2"), None, text)
    }

    fn build(self) -> Case {
        let filler = "The agent inspected the workspace and recorded an observation. ";
        let steps = (1..=self.len)
            .map(|g| {
                let mut input = format!("Step {g} context for {}.\n", self.agent_of(g));
                while input.len() < self.pad {
                    input.push_str(filler);
                }
                StepRecord {
                    index: g,
                    agent: self.agent_of(g).to_string(),
                    input,
                    output: format!("Result of step {g}."),
                }
            })
            .collect();
        let mut script = format!("# {} ({})\n", self.id, self.pattern);
        script.push_str(&self.rules.join(""));
        Case {
            trace: AnnotatedTrace::new(self.id, steps, self.truth),
            script,
            pattern: self.pattern,
        }
    }
}

fn short(id: usize, agents: &[&str], len: u32, truth: u32) -> Builder {
    let b = Builder::new("short", id, agents, len, 200, truth);
    let c = b.culprit();
    let mut b = b.local(&c.clone(), Some(truth), 0.7).summary(&c, Some(truth), "my step looks wrong");
    for a in agents.iter().filter(|a| **a != c) {
        b = b
            .local(a, None, 0.8)
            .summary(a, Some(truth), "my inputs were already wrong")
            .last(a, None, 0.8, false);
    }
    b.last(&c, Some(truth), 0.8, false)
}

/// `symptom` is the late global step where the failure surfaces.
fn symptom(id: usize, len: u32, pad: usize, truth: u32, symptom: u32) -> Case {
    let agents = ["planner", "searcher", "writer"];
    let b = Builder::new("symptom", id, &agents, len, pad, truth);
    let c = b.culprit();
    let s = b.agent_of(symptom).to_string();
    assert_ne!(c, s);
    let third = agents.iter().find(|a| **a != c && **a != s).unwrap().to_string();
    b.global(symptom)
        .local(&s, Some(symptom), 0.8)
        .local(&c, None, 0.6)
        .local(&third, None, 0.9)
        .summary(&s, Some(truth), "the data I received was already wrong")
        .summary(&c, None, "nothing stood out in my steps")
        .summary(&third, Some(truth), "the early hand-off looks inconsistent")
        .last(&c, Some(truth), 0.7, false)
        .last(&s, None, 0.7, false)
        .last(&third, None, 0.9, false)
        .build()
}

/// `other` is another step owned by the culprit, which the global pass picks.
fn denial(id: usize, agents: &[&str], len: u32, truth: u32, other: u32) -> Case {
    let b = Builder::new("denial", id, agents, len, 400, truth);
    let c = b.culprit();
    assert_eq!(b.agent_of(other), c);
    let mut b = b.global(other).local(&c, None, 0.9).summary(&c, None, "my steps look fine");
    for (i, a) in agents.iter().filter(|a| **a != c).enumerate() {
        b = b
            .local(a, None, 0.3 + 0.1 * i as f64)
            .summary(a, Some(truth), "a teammate's output misled me")
            .last(a, None, 0.8, false);
    }
    b.last(&c, Some(truth), 0.6, false).build()
}

/// `rival` is a step of another agent that wrongly confesses.
fn competing(id: usize, len: u32, truth: u32, rival: u32) -> Case {
    let agents = ["coder", "tester", "reviewer"];
    let b = Builder::new("competing", id, &agents, len, 600, truth);
    let c = b.culprit();
    let r = b.agent_of(rival).to_string();
    assert_ne!(c, r);
    let third = agents.iter().find(|a| **a != c && **a != r).unwrap().to_string();
    b.global(rival)
        .local(&c, Some(truth), 0.5)
        .local(&r, Some(rival), 0.8)
        .local(&third, None, 0.9)
        .summary(&c, Some(rival), "my change may have contributed")
        .summary(&r, Some(rival), "my check failed")
        .summary(&third, Some(rival), "the failing check is the visible problem")
        .last(&c, Some(truth), 0.5, true)
        .last(&r, Some(rival), 0.8, false)
        .last(&third, None, 0.9, false)
        .build()
}

/// Every scheme blames `wrong`; with `collab_step` the exchanging culprit
/// confesses to that step of its own instead of the true one.
fn hard(id: usize, len: u32, pad: usize, truth: u32, wrong: u32, collab_step: Option<u32>) -> Case {
    let agents = ["planner", "searcher", "writer"];
    let b = Builder::new("hard", id, &agents, len, pad, truth);
    let c = b.culprit();
    let w = b.agent_of(wrong).to_string();
    assert_ne!(c, w);
    let third = agents.iter().find(|a| **a != c && **a != w).unwrap().to_string();
    let b = b
        .global(wrong)
        .local(&w, Some(wrong), 0.9)
        .local(&c, None, 0.7)
        .local(&third, None, 0.8)
        .summary(&w, Some(wrong), "my final step broke the output")
        .summary(&c, None, "nothing stood out")
        .summary(&third, Some(wrong), "the final step is wrong")
        .last(&w, Some(wrong), 0.9, false)
        .last(&third, None, 0.8, false);
    match collab_step {
        Some(g) => b.last(&c, Some(g), 0.95, false),
        None => b.last(&c, None, 0.7, false),
    }
    .build()
}

/// Characters per step that push a trace of `len` steps over 128K tokens.
fn over_128k(len: u32) -> usize {
    (128_000 * 4 / len as usize) + 2_000
}

pub fn attribution_suite() -> Vec<Case> {
    let mut cases = Vec::new();
    cases.push(short(1, &["solver", "checker"], 6, 3).global(3).build());
    cases.push(short(2, &["planner", "coder", "tester"], 9, 5).global(5).build());
    cases.push(
        short(3, &["planner", "coder"], 8, 4)
            .global_raw("global 1", "I believe the coder slipped around step four.")
            .repair(4)
            .build(),
    );
    // Both global replies unreadable; fallback charges step 1 (planner).
    cases.push(
        short(4, &["planner", "coder"], 10, 6)
            .global_raw("global 1", "unclear")
            .global_raw("global#repair 1", "still unclear")
            .build(),
    );
    // Step 1 is planner, 2 searcher, 3 writer, and so on.
    cases.push(symptom(5, 40, 300, 4, 39));
    cases.push(symptom(6, 57, 300, 8, 57));
    cases.push(symptom(7, 94, 300, 10, 93));
    cases.push(symptom(8, 60, over_128k(60), 5, 58));
    cases.push(symptom(9, 72, over_128k(72), 9, 71));
    cases.push(symptom(10, 94, over_128k(94), 3, 92));
    cases.push(denial(11, &["analyst", "writer"], 16, 5, 11));
    cases.push(denial(12, &["planner", "searcher", "writer"], 21, 8, 17));
    cases.push(denial(13, &["analyst", "writer"], 24, 2, 20));
    cases.push(denial(14, &["planner", "searcher", "writer"], 18, 6, 15));
    // coder, tester, reviewer in rotation.
    cases.push(competing(15, 12, 4, 8));
    cases.push(competing(16, 21, 7, 12));
    cases.push(competing(17, 30, 10, 29));
    cases.push(hard(18, 45, 300, 6, 44, Some(12)));
    cases.push(hard(19, 66, over_128k(66), 7, 65, None));
    cases.push(hard(20, 81, over_128k(81), 2, 79, None));
    cases
}
