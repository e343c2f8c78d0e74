use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{StepIndex, Submission, Verdict};

/// Pair totals closer than this are treated as tied.
pub const TIE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub verdict: Verdict,
    /// Total weight per accused pair, ordered by global step then agent.
    pub totals: Vec<(Verdict, f64)>,
    pub fallback: Option<String>,
}

/// Confidence-weighted vote over self-accusations.
///
/// Each accusation whose step exists in `index` adds `c * (1 + alpha * r)` to
/// its `(analyzer, global step)` pair. The heaviest pair wins; ties go to the
/// smaller global step, then the smaller agent name. With no usable
/// accusation, the least confident denier (ties by name) is charged with its
/// first step. Submissions from analyzers absent from `index` are ignored.
pub fn aggregate_votes(subs: &[Submission], alpha: f64, index: &StepIndex) -> Tally {
    let mut totals: BTreeMap<(u32, String), f64> = BTreeMap::new();
    for s in subs.iter().filter(|s| s.i_erred) {
        if let Some(step) = index.global(&s.analyzer, s.my_step) {
            *totals.entry((step, s.analyzer.clone())).or_insert(0.0) += s.weight(alpha);
        }
    }
    let totals: Vec<(Verdict, f64)> = totals
        .into_iter()
        .map(|((step, agent), w)| (Verdict::new(agent, step), w))
        .collect();

    if let Some(max) = totals.iter().map(|(_, w)| *w).reduce(f64::max) {
        let verdict = totals
            .iter()
            .find(|(_, w)| *w >= max - TIE_EPSILON)
            .map(|(v, _)| v.clone())
            .expect("the maximum is attained");
        return Tally {
            verdict,
            totals,
            fallback: None,
        };
    }

    let mut denier: Option<&Submission> = None;
    for s in subs.iter().filter(|s| index.contains_agent(&s.analyzer)) {
        denier = match denier {
            Some(d)
                if d.confidence < s.confidence
                    || (d.confidence == s.confidence && d.analyzer <= s.analyzer) =>
            {
                Some(d)
            }
            _ => Some(s),
        };
    }
    let (verdict, note) = match denier {
        Some(d) => (
            Verdict::new(&d.analyzer, index.first_step(&d.analyzer).expect("indexed agent has steps")),
            format!("no self-accusation; charged least confident denier `{}`", d.analyzer),
        ),
        None => {
            let first = index.agents()[0].clone();
            (Verdict::new(first, 1), "no usable submission; charged the first step".to_string())
        }
    };
    Tally {
        verdict,
        totals,
        fallback: Some(note),
    }
}
