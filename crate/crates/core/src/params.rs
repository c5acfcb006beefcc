//! Sampling parameters sent with every generation request.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Generation settings. Unknown keys are rejected on deserialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationParams {
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub typical_p: f64,
    pub repetition_penalty: f64,
    pub min_length: u32,
    pub num_beams: u32,
    pub early_stopping: bool,
    pub truncation_length: u32,
    /// `-1` leaves the seed to the backend.
    pub seed: i64,
    pub add_bos_token: bool,
    pub skip_special_tokens: bool,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            max_tokens: 1024,
            temperature: 0.7,
            top_p: 0.1,
            top_k: 40,
            typical_p: 1.0,
            repetition_penalty: 1.18,
            min_length: 0,
            num_beams: 1,
            early_stopping: false,
            truncation_length: 2048,
            seed: -1,
            add_bos_token: true,
            skip_special_tokens: true,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid generation parameter {field}: {reason}")]
pub struct InvalidParams {
    pub field: &'static str,
    pub reason: String,
}

impl GenerationParams {
    /// Defaults for oracle judging: identical except temperature 0.
    pub fn oracle_default() -> Self {
        GenerationParams {
            temperature: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), InvalidParams> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(InvalidParams {
                field: "temperature",
                reason: format!("{} is not >= 0", self.temperature),
            });
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(InvalidParams {
                field: "top_p",
                reason: format!("{} is not in (0, 1]", self.top_p),
            });
        }
        if self.max_tokens < 1 {
            return Err(InvalidParams {
                field: "max_tokens",
                reason: "must be at least 1".into(),
            });
        }
        if !self.typical_p.is_finite() || !self.repetition_penalty.is_finite() {
            return Err(InvalidParams {
                field: "typical_p/repetition_penalty",
                reason: "must be finite".into(),
            });
        }
        Ok(())
    }
}
