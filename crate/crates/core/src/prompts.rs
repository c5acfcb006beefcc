//! The four static instructions used for generation and judging.

use serde::{Deserialize, Serialize};
use thiserror::Error;

const ZERO: &str = include_str!("../data/prompts/zero.txt");
const CRITIQUE: &str = include_str!("../data/prompts/critique.txt");
const REFINER: &str = include_str!("../data/prompts/refiner.txt");
const EVAL: &str = include_str!("../data/prompts/eval.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSet {
    /// Zero-shot instruction. Ends with `Question:`; the task text follows it.
    pub zero: String,
    pub critique: String,
    pub refiner: String,
    /// Pairwise evaluation instruction shown to the oracle.
    pub eval: String,
}

#[derive(Debug, Error)]
#[error("prompt `{0}` is empty")]
pub struct EmptyPrompt(pub &'static str);

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet {
            zero: ZERO.to_string(),
            critique: CRITIQUE.to_string(),
            refiner: REFINER.to_string(),
            eval: EVAL.to_string(),
        }
    }
}

impl PromptSet {
    pub fn validate(&self) -> Result<(), EmptyPrompt> {
        for (name, text) in [
            ("zero", &self.zero),
            ("critique", &self.critique),
            ("refiner", &self.refiner),
            ("eval", &self.eval),
        ] {
            if text.trim().is_empty() {
                return Err(EmptyPrompt(name));
            }
        }
        Ok(())
    }
}
