use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Exponential back-off: the delay after failed attempt `n` is
/// `min(base * 2^(n-1), max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "secs")]
    pub base_delay: Duration,
    #[serde(with = "secs")]
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(1500),
            max_delay: Duration::from_secs(60),
        }
    }
}

impl RetryPolicy {
    pub fn no_retry() -> Self {
        Self {
            max_attempts: 1,
            ..Self::default()
        }
    }

    /// Delay slept after attempt `attempt` (1-based) fails.
    pub fn delay_for(&self, attempt: u32) -> Duration {
        let exp = attempt.saturating_sub(1).min(63);
        let factor = 1u64.checked_shl(exp).unwrap_or(u64::MAX);
        let nanos = (self.base_delay.as_nanos() as u64).saturating_mul(factor);
        Duration::from_nanos(nanos).min(self.max_delay)
    }

    /// The whole schedule for attempts `1..=max_attempts`.
    pub fn schedule(&self) -> Vec<Duration> {
        (1..=self.max_attempts).map(|n| self.delay_for(n)).collect()
    }
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(serde::de::Error::custom("delay must be a non-negative number"));
        }
        Ok(Duration::from_secs_f64(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_doubles_from_one_and_a_half_seconds() {
        let secs: Vec<f64> = RetryPolicy::default()
            .schedule()
            .iter()
            .map(Duration::as_secs_f64)
            .collect();
        assert_eq!(secs, vec![1.5, 3.0, 6.0, 12.0, 24.0]);
    }

    #[test]
    fn delays_are_capped_and_nondecreasing() {
        let p = RetryPolicy {
            max_attempts: 80,
            ..RetryPolicy::default()
        };
        let s = p.schedule();
        assert!(s.windows(2).all(|w| w[0] <= w[1]));
        assert!(s.iter().all(|d| *d <= Duration::from_secs(60)));
        assert_eq!(*s.last().unwrap(), Duration::from_secs(60));
    }
}
