//! PeRFICS: performance, refinement and inference-cost score.
//!
//! ```text
//! Ψ(m) = (η·exp(κ·(α·B + β·I)) + ρ·E) / (exp(γ·C) + δ)
//! ```
//!
//! Evaluated as log Ψ via log-sum-exp; exp(κ·A) reaches e^50 on ordinary inputs.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{weighted_mean, AggregateError, WeightVector};
use crate::benchmark::Category;
use crate::profile::{ModelProfile, Quantization};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerficsError {
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid parameter {name}: {reason}")]
    InvalidParams { name: &'static str, reason: String },
    #[error("duplicate model {0}")]
    DuplicateModel(String),
    #[error("no models to rank")]
    EmptyInput,
    #[error("no model satisfies the constraints")]
    NoFeasibleModel,
    #[error("model {model}: no score for category {category}")]
    MissingCategory { model: String, category: String },
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerficsParams {
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub eta: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for PerficsParams {
    fn default() -> Self {
        PerficsParams {
            alpha: 0.5,
            beta: 1.0,
            rho: 0.5,
            eta: 1.0,
            kappa: 0.5,
            gamma: 0.05,
            delta: 1e-5,
        }
    }
}

impl PerficsParams {
    pub fn from_toml(text: &str) -> Result<Self, PerficsError> {
        let p: PerficsParams = toml::from_str(text).map_err(|e| PerficsError::InvalidParams {
            name: "document",
            reason: e.to_string(),
        })?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PerficsError> {
        let fields = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("rho", self.rho),
            ("eta", self.eta),
            ("kappa", self.kappa),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(PerficsError::InvalidParams {
                    name,
                    reason: "must be finite".into(),
                });
            }
            let strict = name == "eta" || name == "kappa";
            if (strict && v <= 0.0) || v < 0.0 {
                return Err(PerficsError::InvalidParams {
                    name,
                    reason: if strict { "must be > 0" } else { "must be >= 0" }.into(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerficsInput {
    pub model: String,
    /// B, percent of control.
    pub baseline: f64,
    /// I, percentage points gained by refinement.
    pub improvement: f64,
    /// E, external benchmark average.
    pub external: f64,
    /// C, VRAM in GB.
    pub cost: f64,
}

impl PerficsInput {
    pub fn from_refined(model: &str, baseline: f64, refined: f64, external: f64, cost: f64) -> Self {
        PerficsInput {
            model: model.to_string(),
            baseline,
            improvement: refined - baseline,
            external,
            cost,
        }
    }

    pub fn refined(&self) -> f64 {
        self.baseline + self.improvement
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerficsResult {
    pub model: String,
    pub log_score: f64,
    /// exp(log_score); None when it overflows.
    pub score: Option<f64>,
    pub rank: usize,
    pub cost: f64,
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn perfics_log_score(input: &PerficsInput, p: &PerficsParams) -> Result<f64, PerficsError> {
    for (name, v) in [
        ("baseline", input.baseline),
        ("improvement", input.improvement),
        ("external", input.external),
        ("cost", input.cost),
    ] {
        if !v.is_finite() {
            return Err(PerficsError::NonFiniteInput(format!("{}: {name} = {v}", input.model)));
        }
    }
    p.validate()?;
    if input.cost < 0.0 {
        return Err(PerficsError::InvalidInput(format!("{}: negative cost", input.model)));
    }
    let rho_e = p.rho * input.external;
    if rho_e < 0.0 {
        return Err(PerficsError::InvalidInput(format!("{}: rho * external < 0", input.model)));
    }
    let a = p.alpha * input.baseline + p.beta * input.improvement;
    let num = log_add_exp(p.eta.ln() + p.kappa * a, rho_e.ln());
    let den = log_add_exp(p.gamma * input.cost, p.delta.ln());
    let out = num - den;
    if !out.is_finite() {
        return Err(PerficsError::NonFiniteInput(format!("{}: log score {out}", input.model)));
    }
    Ok(out)
}

/// Scores and ranks by descending log Ψ; ties go to the cheaper model, then by name.
pub fn rank_models(inputs: &[PerficsInput], p: &PerficsParams) -> Result<Vec<PerficsResult>, PerficsError> {
    if inputs.is_empty() {
        return Err(PerficsError::EmptyInput);
    }
    let mut seen = HashSet::new();
    for i in inputs {
        if !seen.insert(i.model.as_str()) {
            return Err(PerficsError::DuplicateModel(i.model.clone()));
        }
    }
    let mut out = inputs
        .iter()
        .map(|i| {
            let log_score = perfics_log_score(i, p)?;
            let score = Some(log_score.exp()).filter(|s| s.is_finite());
            Ok(PerficsResult {
                model: i.model.clone(),
                log_score,
                score,
                rank: 0,
                cost: i.cost,
            })
        })
        .collect::<Result<Vec<_>, PerficsError>>()?;
    out.sort_by(|a, b| {
        b.log_score
            .total_cmp(&a.log_score)
            .then(a.cost.total_cmp(&b.cost))
            .then_with(|| a.model.cmp(&b.model))
    });
    for (i, r) in out.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(out)
}

/// Which part of the benchmark a scenario cares about.
#[derive(Debug, Clone, PartialEq)]
pub enum Focus {
    Category(Category),
    Weights(WeightVector),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConstraints {
    pub vram_budget_gb: Option<f64>,
    pub quantization: Quantization,
    pub focus: Focus,
    pub gamma_override: Option<f64>,
}

/// Per-model data for scenario ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioCandidate {
    pub profile: ModelProfile,
    pub zero_shot: Vec<(Category, f64)>,
    pub refined: Vec<(Category, f64)>,
    pub external: f64,
}

fn focus_value(model: &str, rows: &[(Category, f64)], focus: &Focus) -> Result<f64, PerficsError> {
    match focus {
        Focus::Category(c) => rows
            .iter()
            .find(|(rc, _)| rc == c)
            .map(|(_, v)| *v)
            .ok_or_else(|| PerficsError::MissingCategory {
                model: model.to_string(),
                category: c.to_string(),
            }),
        Focus::Weights(w) => Ok(weighted_mean(rows, w)?),
    }
}

/// Drops models over the VRAM budget, derives B and I from the focus, and ranks
/// the rest with C = VRAM at the chosen quantization.
pub fn scenario_rank(
    candidates: &[ScenarioCandidate],
    constraints: &ScenarioConstraints,
    p: &PerficsParams,
) -> Result<Vec<PerficsResult>, PerficsError> {
    let mut params = *p;
    if let Some(g) = constraints.gamma_override {
        params.gamma = g;
    }
    let mut inputs = Vec::new();
    for cand in candidates {
        let name = &cand.profile.name;
        let cost = cand.profile.vram(constraints.quantization);
        if constraints.vram_budget_gb.is_some_and(|budget| cost > budget) {
            log::info!("{name}: {cost} GB exceeds budget, excluded");
            continue;
        }
        let b = focus_value(name, &cand.zero_shot, &constraints.focus)?;
        let r = focus_value(name, &cand.refined, &constraints.focus)?;
        inputs.push(PerficsInput::from_refined(name, b, r, cand.external, cost));
    }
    if inputs.is_empty() {
        return Err(PerficsError::NoFeasibleModel);
    }
    rank_models(&inputs, &params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn published() -> Vec<PerficsInput> {
        vec![
            PerficsInput::from_refined("GPT4X-Alpasta-30B", 92.71, 102.57, 57.9, 12.65),
            PerficsInput::from_refined("Vicuna-7B", 89.31, 99.80, 52.5, 4.13),
            PerficsInput::from_refined("Vicuna-13B", 94.53, 101.72, 53.7, 7.41),
            PerficsInput::from_refined("Guanaco-65B", 98.24, 103.48, 62.2, 34.95),
            PerficsInput::from_refined("Airoboros-7B", 55.60, 52.30, 79.1, 4.44),
        ]
    }

    // 50-digit evaluations of the unsimplified formula.
    const ORACLE: [(&str, f64); 5] = [
        ("GPT4X-Alpasta-30B", 27.474994687412244),
        ("Vicuna-7B", 27.3659918657983),
        ("Vicuna-13B", 26.856993096173531),
        ("Guanaco-65B", 25.432498257961124),
        ("Airoboros-7B", 12.028181224365503),
    ];

    fn naive(i: &PerficsInput, p: &PerficsParams) -> f64 {
        let a = p.alpha * i.baseline + p.beta * i.improvement;
        ((p.eta * (p.kappa * a).exp() + p.rho * i.external) / ((p.gamma * i.cost).exp() + p.delta)).ln()
    }

    #[test]
    fn params_file_matches_defaults() {
        let text = include_str!("../data/golden/perfics_params.toml");
        assert_eq!(PerficsParams::from_toml(text).unwrap(), PerficsParams::default());
        assert!(PerficsParams::from_toml("alpha = 0.5\nbogus = 1").is_err());
        let bad = PerficsParams { eta: 0.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(PerficsError::InvalidParams { name: "eta", .. })));
    }

    #[test]
    fn matches_high_precision_oracle() {
        let p = PerficsParams::default();
        for (input, (name, expected)) in published().iter().zip(ORACLE) {
            assert_eq!(input.model, name);
            let got = perfics_log_score(input, &p).unwrap();
            assert!(((got - expected) / expected).abs() < 1e-12, "{name}: {got} vs {expected}");
        }
    }

    #[test]
    fn all_zero_input() {
        let z = PerficsInput::from_refined("z", 0.0, 0.0, 0.0, 0.0);
        let got = perfics_log_score(&z, &PerficsParams::default()).unwrap();
        assert!((got - (-9.999_950_000_333_33e-6)).abs() < 1e-18, "{got}");
    }

    #[test]
    fn published_order_reproduced() {
        let ranked = rank_models(&published(), &PerficsParams::default()).unwrap();
        let names: Vec<&str> = ranked.iter().map(|r| r.model.as_str()).collect();
        assert_eq!(names, ["GPT4X-Alpasta-30B", "Vicuna-7B", "Vicuna-13B", "Guanaco-65B", "Airoboros-7B"]);
        assert_eq!(ranked.iter().map(|r| r.rank).collect::<Vec<_>>(), [1, 2, 3, 4, 5]);
        assert!(ranked[0].score.is_some());
    }

    #[test]
    fn alpha_one_swaps_vicunas() {
        let p = PerficsParams { alpha: 1.0, ..Default::default() };
        let ranked = rank_models(&published(), &p).unwrap();
        let names: Vec<&str> = ranked.iter().map(|r| r.model.as_str()).collect();
        assert_eq!(names, ["GPT4X-Alpasta-30B", "Vicuna-13B", "Guanaco-65B", "Vicuna-7B", "Airoboros-7B"]);
    }

    #[test]
    fn ranking_edge_cases() {
        let p = PerficsParams::default();
        let one = rank_models(&published()[..1], &p).unwrap();
        assert_eq!(one[0].rank, 1);
        let mut dup = published();
        dup.push(dup[0].clone());
        assert_eq!(rank_models(&dup, &p).unwrap_err(), PerficsError::DuplicateModel("GPT4X-Alpasta-30B".into()));
        assert_eq!(rank_models(&[], &p).unwrap_err(), PerficsError::EmptyInput);
        let cheap = PerficsInput::from_refined("b", 90.0, 95.0, 50.0, 4.0);
        let dear = PerficsInput { model: "a".into(), cost: 8.0, ..cheap.clone() };
        let r = rank_models(&[dear.clone(), cheap.clone()], &p).unwrap();
        assert_eq!(r[0].model, "b");
        // exact tie on score: cheaper first, then name
        let flat = PerficsParams { gamma: 0.0, ..p };
        let r = rank_models(&[dear, cheap], &flat).unwrap();
        assert_eq!(r[0].model, "b");
    }

    #[test]
    fn huge_scores_overflow_to_marker() {
        let big = PerficsInput::from_refined("big", 3000.0, 3000.0, 0.0, 0.0);
        let r = rank_models(&[big], &PerficsParams::default()).unwrap();
        assert!(r[0].log_score > 700.0);
        assert_eq!(r[0].score, None);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = PerficsParams::default();
        let nan = PerficsInput::from_refined("x", f64::NAN, 1.0, 1.0, 1.0);
        assert!(matches!(perfics_log_score(&nan, &p), Err(PerficsError::NonFiniteInput(_))));
        let neg = PerficsInput::from_refined("x", 1.0, 1.0, 1.0, -1.0);
        assert!(matches!(perfics_log_score(&neg, &p), Err(PerficsError::InvalidInput(_))));
    }

    #[test]
    fn doubling_cost_lowers_score() {
        let p = PerficsParams::default();
        for i in published() {
            let doubled = PerficsInput { cost: i.cost * 2.0, ..i.clone() };
            assert!(perfics_log_score(&doubled, &p).unwrap() < perfics_log_score(&i, &p).unwrap());
        }
    }

    proptest! {
        #[test]
        fn agrees_with_naive_form(b in 0.0f64..120.0, i in -30.0f64..30.0, e in 0.0f64..100.0, c in 0.0f64..150.0) {
            let p = PerficsParams::default();
            let input = PerficsInput { model: "m".into(), baseline: b, improvement: i, external: e, cost: c };
            let fast = perfics_log_score(&input, &p).unwrap();
            let slow = naive(&input, &p);
            prop_assert!((fast - slow).abs() <= 1e-9 * slow.abs().max(1e-300) || (fast - slow).abs() < 1e-12);
        }

        #[test]
        fn monotone_in_each_input(b in 0.0f64..120.0, i in -30.0f64..30.0, e in 0.0f64..100.0, c in 0.0f64..150.0, d in 0.001f64..20.0) {
            let p = PerficsParams::default();
            let base = PerficsInput { model: "m".into(), baseline: b, improvement: i, external: e, cost: c };
            let s = perfics_log_score(&base, &p).unwrap();
            let up = |f: &dyn Fn(&mut PerficsInput)| {
                let mut x = base.clone();
                f(&mut x);
                perfics_log_score(&x, &p).unwrap()
            };
            prop_assert!(up(&|x| x.baseline += d) >= s);
            prop_assert!(up(&|x| x.improvement += d) >= s);
            prop_assert!(up(&|x| x.external += d) >= s);
            prop_assert!(up(&|x| x.cost += d) <= s);
        }
    }
}
