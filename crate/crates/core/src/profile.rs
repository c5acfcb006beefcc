//! Model profiles: memory footprint, external benchmark scores and role.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// External benchmark components whose mean is the published average.
pub const EXTERNAL_COMPONENTS: [&str; 4] = ["arc", "hellaswag", "mmlu", "truthfulqa"];
pub const EXTERNAL_AVERAGE: &str = "average";

/// Allowed gap between a published external average and the component mean.
pub const AVERAGE_TOLERANCE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Candidate,
    Control,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub name: String,
    #[serde(default)]
    pub vram_16bit_gb: f64,
    #[serde(default)]
    pub vram_4bit_gb: f64,
    /// Lowercase benchmark name to score (`arc`, `hellaswag`, `mmlu`,
    /// `truthfulqa`, `average`).
    #[serde(default)]
    pub external_scores: BTreeMap<String, f64>,
    #[serde(default)]
    pub role: Role,
}

#[derive(Debug, Error, PartialEq)]
#[error("profile {profile:?}: invariant violated on {field}: {reason}")]
pub struct InvariantViolation {
    pub profile: String,
    pub field: String,
    pub reason: String,
}

/// Memory footprint selector for cost and feasibility calculations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quantization {
    #[serde(rename = "4")]
    FourBit,
    #[serde(rename = "16")]
    SixteenBit,
}

impl ModelProfile {
    pub fn vram(&self, q: Quantization) -> f64 {
        match q {
            Quantization::FourBit => self.vram_4bit_gb,
            Quantization::SixteenBit => self.vram_16bit_gb,
        }
    }

    pub fn external_average(&self) -> Option<f64> {
        self.external_scores.get(EXTERNAL_AVERAGE).copied()
    }

    /// Mean of the four component benchmarks, when all are present.
    pub fn component_mean(&self) -> Option<f64> {
        let vals: Option<Vec<f64>> = EXTERNAL_COMPONENTS
            .iter()
            .map(|k| self.external_scores.get(*k).copied())
            .collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn validate_profile(p: ModelProfile) -> Result<ModelProfile, InvariantViolation> {
    let violation = |field: &str, reason: String| InvariantViolation {
        profile: p.name.clone(),
        field: field.to_string(),
        reason,
    };
    if p.name.trim().is_empty() {
        return Err(violation("name", "empty".into()));
    }
    for (field, v) in [("vram_16bit_gb", p.vram_16bit_gb), ("vram_4bit_gb", p.vram_4bit_gb)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(violation(field, format!("{v} is not a finite value >= 0")));
        }
    }
    if p.vram_4bit_gb > p.vram_16bit_gb {
        return Err(violation(
            "vram_4bit_gb",
            format!("{} exceeds vram_16bit_gb {}", p.vram_4bit_gb, p.vram_16bit_gb),
        ));
    }
    for (k, v) in &p.external_scores {
        if !v.is_finite() {
            return Err(violation(&format!("external_scores.{k}"), "not finite".into()));
        }
    }
    if let (Some(avg), Some(mean)) = (p.external_average(), p.component_mean()) {
        if (avg - mean).abs() > AVERAGE_TOLERANCE + 1e-9 {
            return Err(violation(
                "external_scores.average",
                format!("{avg} differs from component mean {mean:.4} by more than {AVERAGE_TOLERANCE}"),
            ));
        }
    }
    Ok(p)
}
