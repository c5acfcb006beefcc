//! Category means, overall means, refinement deltas, win rates and token growth.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::benchmark::{Category, VICUNA_CATEGORIES};
use crate::judge::{DebiasedScore, PairwiseJudgment, Variant};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggregateError {
    #[error("no valid scores in category {0}")]
    EmptyCategory(String),
    #[error("empty input")]
    EmptyInput,
    #[error("no weight for category {0}")]
    MissingWeight(String),
    #[error("category mismatch: {0} vs {1}")]
    CategoryMismatch(String, String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("zero-shot token total is zero")]
    ZeroBaselineTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: Category,
    pub variant: Variant,
    /// 100 × mean relative score.
    pub mean_relative_pct: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDelta {
    pub category: Category,
    /// Percentage points.
    pub delta_pct: f64,
    /// The two means were taken over different prompt counts.
    pub n_mismatch: bool,
}

/// Non-negative per-category weights, normalized to sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(BTreeMap<Category, f64>);

impl WeightVector {
    pub fn new<I, C>(weights: I) -> Result<Self, AggregateError>
    where
        I: IntoIterator<Item = (C, f64)>,
        C: AsRef<str>,
    {
        let mut map = BTreeMap::new();
        for (c, w) in weights {
            if !w.is_finite() || w < 0.0 {
                return Err(AggregateError::InvalidWeights(format!("{}: {w}", c.as_ref())));
            }
            *map.entry(Category::new(c.as_ref())).or_insert(0.0) += w;
        }
        let total: f64 = map.values().sum();
        if total <= 0.0 {
            return Err(AggregateError::InvalidWeights("all weights are zero".into()));
        }
        for w in map.values_mut() {
            *w /= total;
        }
        Ok(WeightVector(map))
    }

    /// Per-category prompt counts of the 80-prompt Vicuna benchmark.
    pub fn vicuna() -> Self {
        Self::new(VICUNA_CATEGORIES.iter().map(|(c, n)| (*c, *n as f64))).expect("static weights")
    }

    pub fn uniform<'a, I>(categories: I) -> Result<Self, AggregateError>
    where
        I: IntoIterator<Item = &'a Category>,
    {
        Self::new(categories.into_iter().map(|c| (c.as_str(), 1.0)))
    }

    /// Reads a `category = weight` TOML table.
    pub fn from_toml(text: &str) -> Result<Self, AggregateError> {
        let table: BTreeMap<String, f64> = toml::from_str(text).map_err(|e| AggregateError::InvalidWeights(e.to_string()))?;
        Self::new(table)
    }

    pub fn get(&self, category: &Category) -> Option<f64> {
        self.0.get(category).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Category, f64)> {
        self.0.iter().map(|(c, w)| (c, *w))
    }

    /// Weights restricted to `categories`, renormalized.
    fn restricted(&self, categories: &[&Category]) -> Result<Vec<f64>, AggregateError> {
        let raw = categories
            .iter()
            .map(|c| self.get(c).ok_or_else(|| AggregateError::MissingWeight(c.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(AggregateError::InvalidWeights("selected categories carry no weight".into()));
        }
        Ok(raw.into_iter().map(|w| w / total).collect())
    }
}

/// 100 × mean s_r over the given scores, all assumed to belong to `category`.
pub fn category_relative_mean(
    category: &Category,
    variant: Variant,
    scores: &[DebiasedScore],
) -> Result<CategoryScore, AggregateError> {
    if scores.is_empty() {
        return Err(AggregateError::EmptyCategory(category.to_string()));
    }
    let mean = scores.iter().map(|s| s.s_r).sum::<f64>() / scores.len() as f64;
    Ok(CategoryScore {
        category: category.clone(),
        variant,
        mean_relative_pct: 100.0 * mean,
        n: scores.len(),
    })
}

/// Groups scores by category via `category_of`, in the order categories are
/// listed. Categories without any valid score are skipped with a warning.
pub fn category_means<'a>(
    categories: impl IntoIterator<Item = &'a Category>,
    variant: Variant,
    scores: &[DebiasedScore],
    category_of: impl Fn(&str) -> Option<&'a Category>,
) -> Vec<CategoryScore> {
    let mut groups: HashMap<&Category, Vec<DebiasedScore>> = HashMap::new();
    for s in scores {
        if let Some(c) = category_of(&s.prompt_id) {
            groups.entry(c).or_default().push(s.clone());
        }
    }
    categories
        .into_iter()
        .filter_map(|c| match groups.get(c) {
            Some(group) => category_relative_mean(c, variant, group).ok(),
            None => {
                log::warn!("category {c}: no valid {} scores", variant.as_str());
                None
            }
        })
        .collect()
}

pub fn equal_weight_mean(rows: &[(Category, f64)]) -> Result<f64, AggregateError> {
    if rows.is_empty() {
        return Err(AggregateError::EmptyInput);
    }
    Ok(rows.iter().map(|(_, v)| v).sum::<f64>() / rows.len() as f64)
}

/// Σ wᵢ·rowᵢ, with w renormalized over the row categories.
pub fn weighted_mean(rows: &[(Category, f64)], w: &WeightVector) -> Result<f64, AggregateError> {
    if rows.is_empty() {
        return Err(AggregateError::EmptyInput);
    }
    let cats: Vec<&Category> = rows.iter().map(|(c, _)| c).collect();
    let ws = w.restricted(&cats)?;
    Ok(rows.iter().zip(ws).map(|((_, v), w)| w * v).sum())
}

/// Refined mean minus zero-shot mean.
pub fn domain_delta(zero: &CategoryScore, refined: &CategoryScore) -> Result<DomainDelta, AggregateError> {
    if zero.category != refined.category {
        return Err(AggregateError::CategoryMismatch(
            zero.category.to_string(),
            refined.category.to_string(),
        ));
    }
    let n_mismatch = zero.n != refined.n;
    if n_mismatch {
        log::warn!(
            "category {}: delta over unequal counts ({} zero-shot, {} refined)",
            zero.category,
            zero.n,
            refined.n
        );
    }
    Ok(DomainDelta {
        category: zero.category.clone(),
        delta_pct: refined.mean_relative_pct - zero.mean_relative_pct,
        n_mismatch,
    })
}

/// Per-prompt form: 100 × mean of (refined s_r − zero-shot s_r) over prompts
/// scored in both variants.
pub fn paired_domain_delta(
    category: &Category,
    zero: &[DebiasedScore],
    refined: &[DebiasedScore],
) -> Result<DomainDelta, AggregateError> {
    let zero_by_id: HashMap<&str, f64> = zero.iter().map(|s| (s.prompt_id.as_str(), s.s_r)).collect();
    let diffs: Vec<f64> = refined
        .iter()
        .filter_map(|r| zero_by_id.get(r.prompt_id.as_str()).map(|z| r.s_r - z))
        .collect();
    if diffs.is_empty() {
        return Err(AggregateError::EmptyCategory(category.to_string()));
    }
    Ok(DomainDelta {
        category: category.clone(),
        delta_pct: 100.0 * diffs.iter().sum::<f64>() / diffs.len() as f64,
        n_mismatch: diffs.len() != zero.len() || diffs.len() != refined.len(),
    })
}

/// Σ wᵢ·δᵢ with w renormalized over the delta categories.
pub fn total_refinement_performance(deltas: &[DomainDelta], w: &WeightVector) -> Result<f64, AggregateError> {
    let rows: Vec<(Category, f64)> = deltas.iter().map(|d| (d.category.clone(), d.delta_pct)).collect();
    weighted_mean(&rows, w)
}

/// (wins + 0.5·ties) / n. Each inner slice holds one prompt's judgments; the
/// model wins when its score summed over orderings beats the control's.
pub fn win_rate(per_prompt: &[Vec<PairwiseJudgment>]) -> Result<f64, AggregateError> {
    let mut points = 0.0;
    let mut n = 0usize;
    for judgments in per_prompt.iter().filter(|j| !j.is_empty()) {
        let s_m: f64 = judgments.iter().map(|j| j.s_m()).sum();
        let s_c: f64 = judgments.iter().map(|j| j.s_c()).sum();
        n += 1;
        if s_m > s_c {
            points += 1.0;
        } else if s_m == s_c {
            points += 0.5;
        }
    }
    if n == 0 {
        return Err(AggregateError::EmptyInput);
    }
    Ok(points / n as f64)
}

/// Completion tokens of the zero-shot and final refined response for one transcript.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPair {
    pub zero_shot: u64,
    pub refined: u64,
}

/// 100 × (Σ refined − Σ zero-shot) / Σ zero-shot.
pub fn token_change(pairs: &[TokenPair]) -> Result<f64, AggregateError> {
    let zero: u64 = pairs.iter().map(|p| p.zero_shot).sum();
    let refined: u64 = pairs.iter().map(|p| p.refined).sum();
    if zero == 0 {
        return Err(AggregateError::ZeroBaselineTokens);
    }
    Ok(100.0 * (refined as f64 - zero as f64) / zero as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::{Order, ParsedJudgment};
    use proptest::prelude::*;

    fn cat(s: &str) -> Category {
        Category::new(s)
    }

    fn row(values: &[f64]) -> Vec<(Category, f64)> {
        VICUNA_CATEGORIES.iter().zip(values).map(|((c, _), v)| (cat(c), *v)).collect()
    }

    fn score(id: &str, s_r: f64) -> DebiasedScore {
        DebiasedScore {
            prompt_id: id.into(),
            s_m: s_r,
            s_c: 1.0,
            s_r_ab: Some(s_r),
            s_r_ba: Some(s_r),
            s_r,
            partial: false,
        }
    }

    const AIROBOROS_ZERO: [f64; 9] = [89.91, 94.46, 94.75, 82.53, 87.92, 74.35, 31.67, 92.88, 85.98];
    const VICUNA13_ZERO: [f64; 9] = [101.30, 96.86, 99.99, 92.50, 99.23, 78.57, 26.67, 101.09, 102.29];

    #[test]
    fn category_mean_examples() {
        let c = cat("writing");
        let m = category_relative_mean(&c, Variant::ZeroShot, &[score("a", 1.0), score("b", 1.0)]).unwrap();
        assert_eq!((m.mean_relative_pct, m.n), (100.0, 2));
        let m = category_relative_mean(&c, Variant::ZeroShot, &[score("a", 1.1), score("b", 0.9)]).unwrap();
        assert!((m.mean_relative_pct - 100.0).abs() < 1e-12);
        assert_eq!(
            category_relative_mean(&c, Variant::Refined, &[]).unwrap_err(),
            AggregateError::EmptyCategory("writing".into())
        );
    }

    #[test]
    fn grouping_follows_category_order() {
        let cats = [cat("writing"), cat("math")];
        let lookup: HashMap<&str, &Category> = [("a", &cats[0]), ("b", &cats[1]), ("c", &cats[1])].into_iter().collect();
        let means = category_means(&cats, Variant::ZeroShot, &[score("b", 1.0), score("a", 0.5), score("c", 0.0)], |id| {
            lookup.get(id).copied()
        });
        assert_eq!(means.len(), 2);
        assert_eq!((means[0].mean_relative_pct, means[0].n), (50.0, 1));
        assert_eq!((means[1].mean_relative_pct, means[1].n), (50.0, 2));
    }

    #[test]
    fn table_means() {
        assert!((equal_weight_mean(&row(&AIROBOROS_ZERO)).unwrap() - 81.60).abs() < 0.01);
        assert!((equal_weight_mean(&row(&VICUNA13_ZERO)).unwrap() - 88.72).abs() < 0.01);
        let v = WeightVector::vicuna();
        assert!((weighted_mean(&row(&AIROBOROS_ZERO), &v).unwrap() - 86.24).abs() < 0.02);
        assert!((weighted_mean(&row(&VICUNA13_ZERO), &v).unwrap() - 94.53).abs() < 0.02);
        assert_eq!(equal_weight_mean(&[]).unwrap_err(), AggregateError::EmptyInput);
    }

    #[test]
    fn weights() {
        let v = WeightVector::vicuna();
        assert!((v.get(&cat("coding")).unwrap() - 7.0 / 80.0).abs() < 1e-15);
        assert!((v.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-12);
        let w = WeightVector::from_toml("writing = 2\nmath = 6\n").unwrap();
        assert_eq!(w.get(&cat("Math")), Some(0.75));
        assert!(WeightVector::from_toml("writing = -1").is_err());
        assert!(WeightVector::new([("a", 0.0)]).is_err());
        let partial = WeightVector::new([("writing", 1.0)]).unwrap();
        assert_eq!(
            weighted_mean(&row(&AIROBOROS_ZERO), &partial).unwrap_err(),
            AggregateError::MissingWeight("roleplay".into())
        );
    }

    #[test]
    fn deltas() {
        let s = |c: &str, v, m| CategoryScore {
            category: cat(c),
            variant: v,
            mean_relative_pct: m,
            n: 10,
        };
        let d = domain_delta(&s("writing", Variant::ZeroShot, 85.55), &s("writing", Variant::Refined, 82.22)).unwrap();
        assert!((d.delta_pct + 3.33).abs() < 1e-9);
        let d = domain_delta(&s("counterfactual", Variant::ZeroShot, 99.23), &s("counterfactual", Variant::Refined, 112.67)).unwrap();
        assert!((d.delta_pct - 13.44).abs() < 1e-9);
        assert!(matches!(
            domain_delta(&s("writing", Variant::ZeroShot, 1.0), &s("math", Variant::Refined, 1.0)),
            Err(AggregateError::CategoryMismatch(..))
        ));
        let only = WeightVector::new([("writing", 1.0)]).unwrap();
        let one = [DomainDelta {
            category: cat("writing"),
            delta_pct: -3.33,
            n_mismatch: false,
        }];
        assert_eq!(total_refinement_performance(&one, &only).unwrap(), -3.33);
    }

    #[test]
    fn airoboros_total_refinement_uniform() {
        let refined = [86.74, 100.12, 93.65, 67.27, 96.45, 59.72, 23.33, 92.53, 96.91];
        let deltas: Vec<DomainDelta> = VICUNA_CATEGORIES
            .iter()
            .enumerate()
            .map(|(i, (c, _))| DomainDelta {
                category: cat(c),
                delta_pct: refined[i] - AIROBOROS_ZERO[i],
                n_mismatch: false,
            })
            .collect();
        let cats: Vec<Category> = deltas.iter().map(|d| d.category.clone()).collect();
        let total = total_refinement_performance(&deltas, &WeightVector::uniform(&cats).unwrap()).unwrap();
        assert!((total - (79.64 - 81.60)).abs() < 0.02, "{total}");
    }

    #[test]
    fn paired_delta_uses_common_prompts() {
        let c = cat("writing");
        let zero = [score("a", 1.0), score("b", 0.5)];
        let refined = [score("a", 1.2)];
        let d = paired_domain_delta(&c, &zero, &refined).unwrap();
        assert!((d.delta_pct - 20.0).abs() < 1e-9);
        assert!(d.n_mismatch);
    }

    fn judged(ordering: Order, first: f64, second: f64) -> PairwiseJudgment {
        PairwiseJudgment::new(
            "q",
            ordering,
            ParsedJudgment {
                score_first: first,
                score_second: second,
                explanation: String::new(),
                raw_first_line: String::new(),
                lenient: false,
            },
        )
    }

    #[test]
    fn win_rates() {
        let win = vec![judged(Order::ModelFirst, 8.0, 7.0), judged(Order::ControlFirst, 7.0, 8.0)];
        let tie = vec![judged(Order::ModelFirst, 8.0, 7.0), judged(Order::ControlFirst, 8.0, 7.0)];
        let loss = vec![judged(Order::ModelFirst, 5.0, 7.0)];
        assert_eq!(win_rate(&vec![win.clone(); 4]).unwrap(), 1.0);
        assert_eq!(win_rate(&vec![tie.clone(); 3]).unwrap(), 0.5);
        let mut set = vec![win; 6];
        set.push(tie);
        set.extend(vec![loss; 3]);
        assert!((win_rate(&set).unwrap() - 0.65).abs() < 1e-12);
        assert_eq!(win_rate(&[]).unwrap_err(), AggregateError::EmptyInput);
    }

    #[test]
    fn token_changes() {
        let same = [TokenPair { zero_shot: 40, refined: 40 }];
        assert_eq!(token_change(&same).unwrap(), 0.0);
        let grow = [TokenPair { zero_shot: 100, refined: 150 }];
        assert_eq!(token_change(&grow).unwrap(), 50.0);
        assert_eq!(token_change(&[]).unwrap_err(), AggregateError::ZeroBaselineTokens);
    }

    fn arb_row() -> impl Strategy<Value = Vec<(Category, f64)>> {
        prop::collection::vec(0.0f64..200.0, 1..12)
            .prop_map(|vs| vs.into_iter().enumerate().map(|(i, v)| (cat(&format!("c{i}")), v)).collect())
    }

    proptest! {
        #[test]
        fn uniform_weighting_is_plain_mean(rows in arb_row()) {
            let cats: Vec<Category> = rows.iter().map(|(c, _)| c.clone()).collect();
            let w = weighted_mean(&rows, &WeightVector::uniform(&cats).unwrap()).unwrap();
            let e = equal_weight_mean(&rows).unwrap();
            prop_assert!((w - e).abs() <= 1e-12 * e.abs().max(1e-300));
        }

        #[test]
        fn rescaling_weights_changes_nothing(rows in arb_row(), raw in prop::collection::vec(0.01f64..10.0, 12), k in 0.001f64..1000.0) {
            let a = WeightVector::new(rows.iter().zip(&raw).map(|((c, _), w)| (c.as_str(), *w))).unwrap();
            let b = WeightVector::new(rows.iter().zip(&raw).map(|((c, _), w)| (c.as_str(), *w * k))).unwrap();
            let (x, y) = (weighted_mean(&rows, &a).unwrap(), weighted_mean(&rows, &b).unwrap());
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }

        #[test]
        fn self_delta_is_zero(m in -500.0f64..500.0, n in 1usize..20) {
            let s = CategoryScore { category: cat("x"), variant: Variant::ZeroShot, mean_relative_pct: m, n };
            prop_assert_eq!(domain_delta(&s, &s).unwrap().delta_pct, 0.0);
        }

        #[test]
        fn total_refinement_is_linear(d1 in prop::collection::vec(-50.0f64..50.0, 9), d2 in prop::collection::vec(-50.0f64..50.0, 9), k in -5.0f64..5.0) {
            let w = WeightVector::vicuna();
            let mk = |ds: &[f64]| -> Vec<DomainDelta> {
                VICUNA_CATEGORIES.iter().zip(ds).map(|((c, _), d)| DomainDelta { category: cat(c), delta_pct: *d, n_mismatch: false }).collect()
            };
            let combo: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| a + k * b).collect();
            let lhs = total_refinement_performance(&mk(&combo), &w).unwrap();
            let rhs = total_refinement_performance(&mk(&d1), &w).unwrap() + k * total_refinement_performance(&mk(&d2), &w).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }

        #[test]
        fn more_refined_tokens_never_lower_change(pairs in prop::collection::vec((1u64..1000, 0u64..2000), 1..20)) {
            let base: Vec<TokenPair> = pairs.iter().map(|(z, r)| TokenPair { zero_shot: *z, refined: *r }).collect();
            let doubled: Vec<TokenPair> = base.iter().map(|p| TokenPair { refined: p.refined * 2, ..*p }).collect();
            prop_assert!(token_change(&doubled).unwrap() >= token_change(&base).unwrap());
        }
    }
}
