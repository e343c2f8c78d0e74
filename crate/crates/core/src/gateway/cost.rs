use std::collections::BTreeMap;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Usage;

/// Monetary amount in micro-dollars.
///
/// Integer so that summing per-event charges is exact.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Cost(u64);

impl Cost {
    pub const ZERO: Cost = Cost(0);

    pub const fn from_micros(micros: u64) -> Self {
        Cost(micros)
    }

    /// Rounds half-up to the nearest micro-dollar. Negative and NaN inputs
    /// become zero.
    pub fn from_dollars(dollars: f64) -> Self {
        if !(dollars.is_finite() && dollars > 0.0) {
            return Cost(0);
        }
        Cost((dollars * 1e6 + 0.5).floor() as u64)
    }

    pub const fn micros(self) -> u64 {
        self.0
    }

    pub fn dollars(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, other: Cost) -> Cost {
        Cost(self.0.saturating_sub(other.0))
    }
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, rhs: Cost) -> Cost {
        Cost(self.0 + rhs.0)
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        self.0 += rhs.0;
    }
}

impl Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::ZERO, Add::add)
    }
}

impl fmt::Display for Cost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "${}.{:06}", self.0 / 1_000_000, self.0 % 1_000_000)
    }
}

/// Token prices, stored as micro-dollars per million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Price {
    pub input_micros_per_mtok: u64,
    pub output_micros_per_mtok: u64,
}

impl Price {
    /// Prices in dollars per million tokens.
    pub fn per_million(input: f64, output: f64) -> Self {
        Self {
            input_micros_per_mtok: Cost::from_dollars(input).micros(),
            output_micros_per_mtok: Cost::from_dollars(output).micros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no price configured for model `{0}`")]
pub struct UnknownModel(pub String);

/// Per-model pricing table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostModel {
    prices: BTreeMap<String, Price>,
}

#[derive(Deserialize)]
struct PriceEntry {
    input: f64,
    output: f64,
}

impl CostModel {
    pub fn insert(&mut self, model: impl Into<String>, price: Price) {
        self.prices.insert(model.into(), price);
    }

    pub fn with(mut self, model: impl Into<String>, price: Price) -> Self {
        self.insert(model, price);
        self
    }

    /// Parses a YAML map `model: {input: <$/Mtok>, output: <$/Mtok>}`.
    pub fn from_yaml(text: &str) -> Result<Self, serde_yaml::Error> {
        let raw: BTreeMap<String, PriceEntry> = serde_yaml::from_str(text)?;
        let mut model = CostModel::default();
        for (name, p) in raw {
            if p.input < 0.0 || p.output < 0.0 {
                return Err(serde::de::Error::custom(format!(
                    "negative price for model `{name}`"
                )));
            }
            model.insert(name, Price::per_million(p.input, p.output));
        }
        Ok(model)
    }

    pub fn price(&self, model: &str) -> Result<Price, UnknownModel> {
        self.prices
            .get(model)
            .copied()
            .ok_or_else(|| UnknownModel(model.to_string()))
    }

    /// `input_tokens * p_in + output_tokens * p_out`, rounded half-up to the
    /// micro-dollar.
    pub fn estimate(&self, usage: &Usage, model: &str) -> Result<Cost, UnknownModel> {
        let price = self.price(model)?;
        let scaled = usage.input_tokens as u128 * price.input_micros_per_mtok as u128
            + usage.output_tokens as u128 * price.output_micros_per_mtok as u128;
        let micros = (scaled + 500_000) / 1_000_000;
        Ok(Cost(micros.min(u64::MAX as u128) as u64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> CostModel {
        CostModel::default().with("m", Price::per_million(3.0, 15.0))
    }

    #[test]
    fn zero_tokens_cost_nothing() {
        assert_eq!(model().estimate(&Usage::default(), "m").unwrap(), Cost::ZERO);
    }

    #[test]
    fn one_million_input_tokens_at_three_dollars() {
        let usage = Usage {
            input_tokens: 1_000_000,
            output_tokens: 0,
        };
        assert_eq!(model().estimate(&usage, "m").unwrap().dollars(), 3.0);
    }

    #[test]
    fn rounding_is_half_up() {
        // 0.5 micro-dollars per token; one token is exactly half a micro.
        let cm = CostModel::default().with("h", Price::per_million(0.5, 0.0));
        let one = Usage {
            input_tokens: 1,
            output_tokens: 0,
        };
        assert_eq!(cm.estimate(&one, "h").unwrap(), Cost::from_micros(1));
    }

    #[test]
    fn unknown_model_is_explicit() {
        assert_eq!(
            model().estimate(&Usage::default(), "x"),
            Err(UnknownModel("x".into()))
        );
    }

    #[test]
    fn yaml_table() {
        let cm = CostModel::from_yaml("m:\n  input: 0.25\n  output: 1.25\n").unwrap();
        assert_eq!(
            cm.price("m").unwrap(),
            Price {
                input_micros_per_mtok: 250_000,
                output_micros_per_mtok: 1_250_000
            }
        );
        assert!(CostModel::from_yaml("m: {input: -1, output: 0}").is_err());
    }

    #[test]
    fn display() {
        assert_eq!(Cost::from_micros(50_000_001).to_string(), "$50.000001");
    }
}
