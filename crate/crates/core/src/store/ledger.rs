//! Token and cost accounting.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::gateway::TokenUsage;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub call_count: u64,
}

impl UsageTotals {
    fn add(&mut self, usage: &TokenUsage) {
        self.prompt_tokens += usage.prompt_tokens;
        self.completion_tokens += usage.completion_tokens;
        self.call_count += 1;
    }
}

/// Prices in currency units per 1000 tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Price {
    #[serde(default)]
    pub prompt_per_1k: f64,
    #[serde(default)]
    pub completion_per_1k: f64,
}

pub type PriceTable = BTreeMap<String, Price>;

/// Usage totals for generating models and for the oracle, plus estimated cost.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub models: BTreeMap<String, UsageTotals>,
    pub oracle: BTreeMap<String, UsageTotals>,
    pub estimated_cost: f64,
}

impl CostLedger {
    pub fn record(&mut self, model: &str, oracle: bool, usage: &TokenUsage) {
        let bucket = if oracle { &mut self.oracle } else { &mut self.models };
        bucket.entry(model.to_string()).or_default().add(usage);
    }

    /// Recomputes `estimated_cost` from the price table. Models without a
    /// price contribute nothing.
    pub fn apply_prices(&mut self, prices: &PriceTable) {
        self.estimated_cost = self
            .models
            .iter()
            .chain(self.oracle.iter())
            .filter_map(|(name, t)| {
                prices.get(name).map(|p| {
                    t.prompt_tokens as f64 / 1000.0 * p.prompt_per_1k
                        + t.completion_tokens as f64 / 1000.0 * p.completion_per_1k
                })
            })
            .sum();
    }

    pub fn total(&self) -> UsageTotals {
        let mut out = UsageTotals::default();
        for t in self.models.values().chain(self.oracle.values()) {
            out.prompt_tokens += t.prompt_tokens;
            out.completion_tokens += t.completion_tokens;
            out.call_count += t.call_count;
        }
        out
    }
}

/// Thread-safe ledger updated by the gateway as responses arrive.
#[derive(Debug, Default)]
pub struct SharedLedger(Mutex<CostLedger>);

impl SharedLedger {
    pub fn record(&self, model: &str, oracle: bool, usage: &TokenUsage) {
        self.0.lock().expect("ledger poisoned").record(model, oracle, usage);
    }

    pub fn snapshot(&self) -> CostLedger {
        self.0.lock().expect("ledger poisoned").clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn usage(p: u64, c: u64) -> TokenUsage {
        TokenUsage {
            prompt_tokens: p,
            completion_tokens: c,
            approximate: false,
        }
    }

    #[test]
    fn pricing() {
        let mut l = CostLedger::default();
        l.record("a", false, &usage(1000, 500));
        l.record("a", false, &usage(1000, 500));
        l.record("gpt-4", true, &usage(2000, 100));
        let mut prices = PriceTable::new();
        prices.insert("a".into(), Price { prompt_per_1k: 0.5, completion_per_1k: 1.0 });
        prices.insert("gpt-4".into(), Price { prompt_per_1k: 0.03, completion_per_1k: 0.06 });
        l.apply_prices(&prices);
        let expected = 2.0 * 0.5 + 1.0 * 1.0 + 2.0 * 0.03 + 0.1 * 0.06;
        assert!((l.estimated_cost - expected).abs() < 1e-12);
        assert_eq!(l.models["a"].call_count, 2);
        assert_eq!(l.oracle["gpt-4"].prompt_tokens, 2000);
        assert_eq!(l.total().call_count, 3);
    }

    #[test]
    fn zero_prices_cost_nothing() {
        let mut l = CostLedger::default();
        l.record("a", false, &usage(10, 10));
        let mut prices = PriceTable::new();
        prices.insert("a".into(), Price::default());
        l.apply_prices(&prices);
        assert_eq!(l.estimated_cost, 0.0);
    }
}
