use std::fmt;

use serde::{Deserialize, Serialize};

use super::{AttributionError, Verdict};
use crate::trace::TokenBucket;

/// What scoring an empty list yields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyPolicy {
    /// `LengthMismatch { 0, 0 }`.
    #[default]
    Error,
    /// Zero accuracy over zero traces.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub n: usize,
    pub agent_correct: usize,
    pub step_correct: usize,
    pub agent_accuracy: f64,
    pub step_accuracy: f64,
}

impl Accuracy {
    fn from_counts(n: usize, agent_correct: usize, step_correct: usize) -> Self {
        let rate = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        Self {
            n,
            agent_correct,
            step_correct,
            agent_accuracy: rate(agent_correct),
            step_accuracy: rate(step_correct),
        }
    }
}

/// Exact-match rates: agent accuracy compares the agent alone, step accuracy
/// the full `(agent, step)` pair.
pub fn score(verdicts: &[Verdict], truths: &[Verdict], empty: EmptyPolicy) -> Result<Accuracy, AttributionError> {
    if verdicts.len() != truths.len() || (verdicts.is_empty() && empty == EmptyPolicy::Error) {
        return Err(AttributionError::LengthMismatch {
            verdicts: verdicts.len(),
            truths: truths.len(),
        });
    }
    let agent = verdicts
        .iter()
        .zip(truths)
        .filter(|(v, t)| v.mistake_agent == t.mistake_agent)
        .count();
    let step = verdicts.iter().zip(truths).filter(|(v, t)| v == t).count();
    Ok(Accuracy::from_counts(verdicts.len(), agent, step))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    /// Both length buckets, shortest first; empty buckets score zero.
    pub buckets: Vec<(TokenBucket, Accuracy)>,
    pub overall: Accuracy,
}

/// Scores `(bucket, verdict, truth)` rows per length bucket and overall.
pub fn bucket_report(rows: &[(TokenBucket, Verdict, Verdict)]) -> BucketReport {
    let part = |bucket: Option<TokenBucket>| {
        let (v, t): (Vec<Verdict>, Vec<Verdict>) = rows
            .iter()
            .filter(|(b, _, _)| bucket.is_none_or(|want| *b == want))
            .map(|(_, v, t)| (v.clone(), t.clone()))
            .unzip();
        score(&v, &t, EmptyPolicy::Zero).expect("lengths agree")
    };
    BucketReport {
        buckets: [TokenBucket::UpTo128K, TokenBucket::Over128K]
            .into_iter()
            .map(|b| (b, part(Some(b))))
            .collect(),
        overall: part(None),
    }
}

impl fmt::Display for BucketReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>5} {:>10} {:>10}", "split", "n", "agent_acc", "step_acc")?;
        let rows = self
            .buckets
            .iter()
            .map(|(b, a)| (b.label(), a))
            .chain(std::iter::once(("all", &self.overall)));
        for (label, a) in rows {
            writeln!(
                f,
                "{:<8} {:>5} {:>10.3} {:>10.3}",
                label, a.n, a.agent_accuracy, a.step_accuracy
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_of_three_agents_one_step() {
        let v = [Verdict::new("a", 1), Verdict::new("b", 2), Verdict::new("c", 3)];
        let t = [Verdict::new("a", 1), Verdict::new("b", 5), Verdict::new("a", 3)];
        let acc = score(&v, &t, EmptyPolicy::Error).unwrap();
        assert_eq!((acc.agent_correct, acc.step_correct), (2, 1));
        assert!((acc.agent_accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert!((acc.step_accuracy - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_and_mismatched_lengths() {
        assert!(matches!(
            score(&[], &[], EmptyPolicy::Error),
            Err(AttributionError::LengthMismatch { verdicts: 0, truths: 0 })
        ));
        assert_eq!(score(&[], &[], EmptyPolicy::Zero).unwrap().agent_accuracy, 0.0);
        assert!(score(&[Verdict::new("a", 1)], &[], EmptyPolicy::Zero).is_err());
    }

    #[test]
    fn report_has_both_buckets() {
        let rows = vec![
            (TokenBucket::UpTo128K, Verdict::new("a", 1), Verdict::new("a", 1)),
            (TokenBucket::Over128K, Verdict::new("a", 1), Verdict::new("a", 2)),
            (TokenBucket::Over128K, Verdict::new("b", 1), Verdict::new("a", 2)),
        ];
        let r = bucket_report(&rows);
        assert_eq!(r.buckets[0].1.step_correct, 1);
        assert_eq!(r.buckets[1].1.n, 2);
        assert_eq!(r.buckets[1].1.agent_correct, 1);
        assert_eq!(r.overall.n, 3);
        let text = r.to_string();
        assert!(text.contains("<=128K"));
        assert!(text.contains(">128K"));
    }
}
