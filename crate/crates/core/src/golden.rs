//! Published reference data shipped with the crate (`data/golden/*.csv`).

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::WeightVector;
use crate::benchmark::Category;
use crate::judge::{Order, Variant};
use crate::perfics::{PerficsError, PerficsInput, PerficsParams, ScenarioCandidate};
use crate::profile::{ModelProfile, Role};
use crate::report::{change_table, refinement_table, ModelColumns, ReportTable};

pub const VRAM_CSV: &str = include_str!("../data/golden/vram.csv");
pub const EXTERNAL_CSV: &str = include_str!("../data/golden/external_scores.csv");
pub const REFINEMENT_CSV: &str = include_str!("../data/golden/refinement.csv");
pub const ORDERS_CSV: &str = include_str!("../data/golden/orderings.csv");
pub const RANKING_CSV: &str = include_str!("../data/golden/ranking.csv");
pub const PARAMS_TOML: &str = include_str!("../data/golden/perfics_params.toml");

/// Row labels of the two summary rows.
pub const MEAN_EQ_ROW: &str = "mean-eq-weight";
pub const MEAN_VICUNA_ROW: &str = "mean-vicuna";

#[derive(Debug, Error)]
pub enum GoldenError {
    #[error("{file}: {source}")]
    Csv { file: &'static str, source: csv::Error },
    #[error(transparent)]
    Params(#[from] PerficsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VramRow {
    pub model: String,
    pub vram_16bit_gb: f64,
    pub vram_4bit_gb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalRow {
    pub model: String,
    pub average: f64,
    pub arc: f64,
    pub hellaswag: f64,
    pub mmlu: f64,
    pub truthfulqa: f64,
}

/// Averaged (both orderings) category percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRow {
    pub model: String,
    pub row: String,
    pub zero_shot: f64,
    pub refined: f64,
}

/// Per-ordering category percentages with the published change column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub model: String,
    pub ordering: Order,
    pub row: String,
    pub zero_shot: f64,
    pub refined: f64,
    pub change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub rank: usize,
    pub model: String,
    pub vram_cost: f64,
    pub baseline: f64,
    pub refined: f64,
    pub ext_avg: f64,
}

fn is_summary(row: &str) -> bool {
    row == MEAN_EQ_ROW || row == MEAN_VICUNA_ROW
}

fn pick(zero: f64, refined: f64, v: Variant) -> f64 {
    match v {
        Variant::ZeroShot => zero,
        Variant::Refined => refined,
    }
}

fn read<T: DeserializeOwned>(file: &'static str, text: &str) -> Result<Vec<T>, GoldenError> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|source| GoldenError::Csv { file, source })
}

#[derive(Debug, Deserialize)]
struct InputRow {
    model: String,
    vram_cost: f64,
    baseline: f64,
    refined: f64,
    ext_avg: f64,
}

/// Ranking inputs from csv with columns `model,vram_cost,baseline,refined,ext_avg`
/// (other columns are ignored).
pub fn parse_perfics_inputs(text: &str) -> Result<Vec<PerficsInput>, GoldenError> {
    let rows: Vec<InputRow> = read("profiles", text)?;
    Ok(rows
        .into_iter()
        .map(|r| PerficsInput::from_refined(&r.model, r.baseline, r.refined, r.ext_avg, r.vram_cost))
        .collect())
}

/// All reference tables. Fields are public so tests can perturb them.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldenData {
    pub vram: Vec<VramRow>,
    pub external: Vec<ExternalRow>,
    pub refinement: Vec<RefinementRow>,
    pub orders: Vec<OrderRow>,
    pub ranking: Vec<RankingRow>,
    pub params: PerficsParams,
}

impl GoldenData {
    pub fn embedded() -> Result<Self, GoldenError> {
        Ok(GoldenData {
            vram: read("vram.csv", VRAM_CSV)?,
            external: read("external_scores.csv", EXTERNAL_CSV)?,
            refinement: read("refinement.csv", REFINEMENT_CSV)?,
            orders: read("orderings.csv", ORDERS_CSV)?,
            ranking: read("ranking.csv", RANKING_CSV)?,
            params: PerficsParams::from_toml(PARAMS_TOML)?,
        })
    }

    /// Models of the refinement table, in table order.
    pub fn models(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.refinement {
            if !out.contains(&r.model.as_str()) {
                out.push(&r.model);
            }
        }
        out
    }

    /// Models with per-ordering tables.
    pub fn ordered_models(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.orders {
            if !out.contains(&r.model.as_str()) {
                out.push(&r.model);
            }
        }
        out
    }

    /// The nine category cells of one model's column.
    pub fn category_row(&self, model: &str, v: Variant) -> Vec<(Category, f64)> {
        self.refinement
            .iter()
            .filter(|r| r.model == model && !is_summary(&r.row))
            .map(|r| (Category::new(&r.row), pick(r.zero_shot, r.refined, v)))
            .collect()
    }

    /// A published summary row value (`MEAN_EQ_ROW` or `MEAN_VICUNA_ROW`).
    pub fn published_mean(&self, model: &str, row: &str, v: Variant) -> Option<f64> {
        self.refinement
            .iter()
            .find(|r| r.model == model && r.row == row)
            .map(|r| pick(r.zero_shot, r.refined, v))
    }

    pub fn order_rows(&self, model: &str, ordering: Order) -> Vec<&OrderRow> {
        self.orders
            .iter()
            .filter(|r| r.model == model && r.ordering == ordering)
            .collect()
    }

    pub fn order_category_row(&self, model: &str, ordering: Order, v: Variant) -> Vec<(Category, f64)> {
        self.order_rows(model, ordering)
            .into_iter()
            .filter(|r| !is_summary(&r.row))
            .map(|r| (Category::new(&r.row), pick(r.zero_shot, r.refined, v)))
            .collect()
    }

    /// Memory footprint plus external benchmark scores per model.
    pub fn profiles(&self) -> Vec<ModelProfile> {
        let external: BTreeMap<&str, &ExternalRow> = self.external.iter().map(|e| (e.model.as_str(), e)).collect();
        self.vram
            .iter()
            .map(|v| {
                let mut scores = BTreeMap::new();
                if let Some(e) = external.get(v.model.as_str()) {
                    for (k, val) in [
                        ("average", e.average),
                        ("arc", e.arc),
                        ("hellaswag", e.hellaswag),
                        ("mmlu", e.mmlu),
                        ("truthfulqa", e.truthfulqa),
                    ] {
                        scores.insert(k.to_string(), val);
                    }
                }
                ModelProfile {
                    name: v.model.clone(),
                    vram_16bit_gb: v.vram_16bit_gb,
                    vram_4bit_gb: v.vram_4bit_gb,
                    external_scores: scores,
                    role: Role::Candidate,
                }
            })
            .collect()
    }

    /// Ranking-table inputs, in published rank order.
    pub fn perfics_inputs(&self) -> Vec<PerficsInput> {
        let mut rows: Vec<&RankingRow> = self.ranking.iter().collect();
        rows.sort_by_key(|r| r.rank);
        rows.iter()
            .map(|r| PerficsInput::from_refined(&r.model, r.baseline, r.refined, r.ext_avg, r.vram_cost))
            .collect()
    }

    /// Published ranking order.
    pub fn published_order(&self) -> Vec<String> {
        self.perfics_inputs().into_iter().map(|i| i.model).collect()
    }

    /// Scenario inputs: category cells, ranking-table external score, profile VRAM.
    pub fn scenario_candidates(&self) -> Vec<ScenarioCandidate> {
        let profiles = self.profiles();
        self.ranking
            .iter()
            .filter_map(|r| {
                let profile = profiles.iter().find(|p| p.name == r.model)?.clone();
                Some(ScenarioCandidate {
                    zero_shot: self.category_row(&r.model, Variant::ZeroShot),
                    refined: self.category_row(&r.model, Variant::Refined),
                    external: r.ext_avg,
                    profile,
                })
            })
            .collect()
    }
}

impl GoldenData {
    /// Category means per model with recomputed summary rows.
    pub fn refinement_table(&self, weights: &WeightVector, weights_label: &str) -> ReportTable {
        let cols: Vec<ModelColumns> = self
            .models()
            .into_iter()
            .map(|m| ModelColumns {
                model: m.to_string(),
                zero_shot: self.category_row(m, Variant::ZeroShot),
                refined: self.category_row(m, Variant::Refined),
            })
            .collect();
        refinement_table("Scores as % of control", &cols, weights, weights_label)
    }

    /// One table per model and ordering; the change column is recomputed.
    pub fn order_tables(&self) -> Vec<ReportTable> {
        let mut out = Vec::new();
        for m in self.ordered_models() {
            for o in [Order::ModelFirst, Order::ControlFirst] {
                let rows: Vec<(String, f64, f64)> = self
                    .order_rows(m, o)
                    .into_iter()
                    .map(|r| {
                        let label = match r.row.as_str() {
                            MEAN_EQ_ROW => "Mean (Eq Weight)".to_string(),
                            MEAN_VICUNA_ROW => "Mean (Vicuna)".to_string(),
                            other => other.to_string(),
                        };
                        (label, r.zero_shot, r.refined)
                    })
                    .collect();
                let label = match o {
                    Order::ModelFirst => "model answer first",
                    Order::ControlFirst => "control answer first",
                };
                out.push(change_table(&format!("{m}, {label}"), &rows));
            }
        }
        out
    }
}
