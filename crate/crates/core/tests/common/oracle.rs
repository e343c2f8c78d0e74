//! Exact-arithmetic reference for the confidence-weighted vote.

use num_rational::Ratio;
use num_traits::Zero;

/// A submission with confidence in hundredths.
#[derive(Debug, Clone)]
pub struct RawSub {
    pub analyzer: String,
    pub i_erred: bool,
    pub my_step: u32,
    pub hundredths: i64,
    pub disagree: bool,
}

/// Brute force over every `(agent, global step)` of the trace.
///
/// `step_agents[g - 1]` is the agent of global step `g`.
pub fn oracle_verdict(step_agents: &[String], subs: &[RawSub], alpha: Ratio<i64>) -> (String, u32) {
    let global_of = |agent: &str, local: u32| -> Option<u32> {
        step_agents
            .iter()
            .enumerate()
            .filter(|(_, a)| a.as_str() == agent)
            .nth((local as usize).checked_sub(1)?)
            .map(|(i, _)| i as u32 + 1)
    };
    let mut candidates: Vec<(Ratio<i64>, u32, String)> = Vec::new();
    for (i, agent) in step_agents.iter().enumerate() {
        let step = i as u32 + 1;
        let mut total = Ratio::zero();
        let mut accused = false;
        for s in subs {
            if s.i_erred && s.analyzer == *agent && global_of(&s.analyzer, s.my_step) == Some(step) {
                accused = true;
                let r = if s.disagree { Ratio::from_integer(1) } else { Ratio::zero() };
                total += Ratio::new(s.hundredths, 100) * (Ratio::from_integer(1) + alpha * r);
            }
        }
        if accused {
            candidates.push((total, step, agent.clone()));
        }
    }
    if !candidates.is_empty() {
        candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let (_, step, agent) = candidates.swap_remove(0);
        return (agent, step);
    }
    let mut deniers: Vec<(i64, String)> = subs
        .iter()
        .filter(|s| step_agents.contains(&s.analyzer))
        .map(|s| (s.hundredths, s.analyzer.clone()))
        .collect();
    deniers.sort();
    match deniers.first() {
        Some((_, agent)) => (agent.clone(), global_of(agent, 1).unwrap()),
        None => (step_agents[0].clone(), 1),
    }
}
