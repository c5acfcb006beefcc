//! The zero-shot / critique / refine procedure.
//!
//! Context layout (frozen, fixture keys depend on it):
//!
//! ```text
//! zero-shot:  "{I_zero} {x}"
//! critique:   "Question: {x}\n\nResponse: {y}\n\n{I_critique}"
//! refine:     "Question: {x}\n\nResponse: {y}\n\nCritique: {c}\n\n{I_refiner}"
//! ```
//!
//! Later rounds critique and refine the latest response only.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{CompletionRequest, CompletionResponse, Gateway, GatewayError, TokenUsage};
use crate::params::GenerationParams;
use crate::prompts::PromptSet;
use crate::store::{EventDraft, RunEvent, RunStore, Step, StoreError, WorkItem};

pub const QUESTION_LABEL: &str = "Question:";
pub const RESPONSE_LABEL: &str = "Response:";
pub const CRITIQUE_LABEL: &str = "Critique:";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("iterations must be at least 1")]
    InvalidIterations,
    #[error("{model} / {prompt_id}: {step:?} failed: {source}")]
    Phase {
        model: String,
        prompt_id: String,
        step: Step,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub fn compose_zero_shot(x: &str, prompts: &PromptSet) -> String {
    format!("{} {x}", prompts.zero)
}

pub fn compose_critique(x: &str, y: &str, prompts: &PromptSet) -> String {
    format!("{QUESTION_LABEL} {x}\n\n{RESPONSE_LABEL} {y}\n\n{}", prompts.critique)
}

pub fn compose_refinement(x: &str, y: &str, c: &str, prompts: &PromptSet) -> String {
    format!(
        "{QUESTION_LABEL} {x}\n\n{RESPONSE_LABEL} {y}\n\n{CRITIQUE_LABEL} {c}\n\n{}",
        prompts.refiner
    )
}

/// One phase's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseOutput {
    pub content: String,
    pub usage: TokenUsage,
    /// Backend returned nothing but whitespace. Kept and scored anyway.
    pub empty: bool,
}

impl PhaseOutput {
    fn from_response(resp: CompletionResponse) -> Self {
        PhaseOutput {
            empty: resp.is_empty(),
            content: resp.content,
            usage: resp.usage,
        }
    }

    fn from_event(ev: &RunEvent) -> Self {
        PhaseOutput {
            empty: ev.content.trim().is_empty(),
            content: ev.content.clone(),
            usage: ev.usage,
        }
    }
}

async fn call(gateway: &Gateway, model: &str, content: String, params: &GenerationParams) -> Result<PhaseOutput, GatewayError> {
    let req = CompletionRequest::user(model, content, params);
    let out = PhaseOutput::from_response(gateway.send_completion(&req).await?);
    if out.empty {
        log::warn!("{model}: empty response");
    }
    Ok(out)
}

pub async fn generate_zero_shot(
    gateway: &Gateway,
    model: &str,
    x: &str,
    prompts: &PromptSet,
    params: &GenerationParams,
) -> Result<PhaseOutput, GatewayError> {
    call(gateway, model, compose_zero_shot(x, prompts), params).await
}

pub async fn generate_critique(
    gateway: &Gateway,
    model: &str,
    x: &str,
    y: &str,
    prompts: &PromptSet,
    params: &GenerationParams,
) -> Result<PhaseOutput, GatewayError> {
    call(gateway, model, compose_critique(x, y, prompts), params).await
}

pub async fn generate_refinement(
    gateway: &Gateway,
    model: &str,
    x: &str,
    y: &str,
    c: &str,
    prompts: &PromptSet,
    params: &GenerationParams,
) -> Result<PhaseOutput, GatewayError> {
    call(gateway, model, compose_refinement(x, y, c, prompts), params).await
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub critique: String,
    pub refined: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTranscript {
    pub model: String,
    pub prompt_id: String,
    pub y0: String,
    pub rounds: Vec<Round>,
    /// y0, then critique and refine for each round.
    pub usage: Vec<TokenUsage>,
    pub params: GenerationParams,
    /// Phases whose output was empty.
    pub empty: Vec<Step>,
}

impl RefinementTranscript {
    pub fn final_response(&self) -> &str {
        self.rounds.last().map_or(&self.y0, |r| &r.refined)
    }

    pub fn zero_shot_tokens(&self) -> u64 {
        self.usage.first().map_or(0, |u| u.completion_tokens)
    }

    pub fn refined_tokens(&self) -> u64 {
        if self.rounds.is_empty() {
            return self.zero_shot_tokens();
        }
        self.usage.last().map_or(0, |u| u.completion_tokens)
    }

    /// Rebuilds a transcript from logged events. None unless every phase up
    /// to `iterations` has completed.
    pub fn from_events(
        model: &str,
        prompt_id: &str,
        events: &[RunEvent],
        iterations: u32,
        params: &GenerationParams,
    ) -> Option<Self> {
        let find = |step: Step| {
            events.iter().find(|e| {
                !e.is_failure() && e.model == model && e.prompt_id == prompt_id && e.step() == Some(step)
            })
        };
        let mut empty = Vec::new();
        let mut note = |step: Step, ev: &RunEvent| {
            if ev.content.trim().is_empty() {
                empty.push(step);
            }
        };
        let zero = find(Step::ZeroShot)?;
        note(Step::ZeroShot, zero);
        let mut usage = vec![zero.usage];
        let mut rounds = Vec::new();
        for round in 1..=iterations {
            let c = find(Step::Critique { round })?;
            let r = find(Step::Refine { round })?;
            note(Step::Critique { round }, c);
            note(Step::Refine { round }, r);
            usage.push(c.usage);
            usage.push(r.usage);
            rounds.push(Round {
                critique: c.content.clone(),
                refined: r.content.clone(),
            });
        }
        Some(RefinementTranscript {
            model: model.to_string(),
            prompt_id: prompt_id.to_string(),
            y0: zero.content.clone(),
            rounds,
            usage,
            params: params.clone(),
            empty,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlTranscript {
    pub model: String,
    pub prompt_id: String,
    pub y_c: String,
    pub usage: TokenUsage,
    pub empty: bool,
}

/// Runs phases against a gateway, persisting each to the run store (when
/// given) and reusing phases the store already has.
pub struct Engine<'a> {
    pub gateway: &'a Gateway,
    pub prompts: &'a PromptSet,
    pub params: &'a GenerationParams,
    pub store: Option<&'a RunStore>,
}

impl<'a> Engine<'a> {
    pub fn new(gateway: &'a Gateway, prompts: &'a PromptSet, params: &'a GenerationParams) -> Self {
        Engine {
            gateway,
            prompts,
            params,
            store: None,
        }
    }

    pub fn with_store(mut self, store: &'a RunStore) -> Self {
        self.store = Some(store);
        self
    }

    async fn step(&self, item: WorkItem, content: String) -> Result<PhaseOutput, EngineError> {
        if let Some(ev) = self.store.and_then(|s| s.completed(&item)) {
            return Ok(PhaseOutput::from_event(&ev));
        }
        match call(self.gateway, &item.model, content, self.params).await {
            Ok(out) => {
                if let Some(store) = self.store {
                    store.append(EventDraft::for_step(&item, out.content.clone(), out.usage))?;
                }
                Ok(out)
            }
            Err(source) => {
                if let Some(store) = self.store {
                    store.append(EventDraft::failure(&item, source.to_string()))?;
                }
                Err(EngineError::Phase {
                    model: item.model,
                    prompt_id: item.prompt_id,
                    step: item.step,
                    source,
                })
            }
        }
    }

    fn item(model: &str, prompt_id: &str, step: Step) -> WorkItem {
        WorkItem {
            model: model.to_string(),
            prompt_id: prompt_id.to_string(),
            step,
        }
    }

    /// y0, then `iterations` critique/refine rounds, strictly in order.
    pub async fn run_procedure(
        &self,
        model: &str,
        prompt_id: &str,
        x: &str,
        iterations: u32,
    ) -> Result<RefinementTranscript, EngineError> {
        if iterations == 0 {
            return Err(EngineError::InvalidIterations);
        }
        let mut empty = Vec::new();
        let zero = self
            .step(Self::item(model, prompt_id, Step::ZeroShot), compose_zero_shot(x, self.prompts))
            .await?;
        if zero.empty {
            empty.push(Step::ZeroShot);
        }
        let mut usage = vec![zero.usage];
        let mut rounds: Vec<Round> = Vec::new();
        for round in 1..=iterations {
            let latest = rounds.last().map_or(zero.content.as_str(), |r| r.refined.as_str());
            let c = self
                .step(
                    Self::item(model, prompt_id, Step::Critique { round }),
                    compose_critique(x, latest, self.prompts),
                )
                .await?;
            let y = self
                .step(
                    Self::item(model, prompt_id, Step::Refine { round }),
                    compose_refinement(x, latest, &c.content, self.prompts),
                )
                .await?;
            if c.empty {
                empty.push(Step::Critique { round });
            }
            if y.empty {
                empty.push(Step::Refine { round });
            }
            usage.push(c.usage);
            usage.push(y.usage);
            rounds.push(Round {
                critique: c.content,
                refined: y.content,
            });
        }
        Ok(RefinementTranscript {
            model: model.to_string(),
            prompt_id: prompt_id.to_string(),
            y0: zero.content,
            rounds,
            usage,
            params: self.params.clone(),
            empty,
        })
    }

    /// The control model's zero-shot answer.
    pub async fn run_control(&self, model: &str, prompt_id: &str, x: &str) -> Result<ControlTranscript, EngineError> {
        let out = self
            .step(Self::item(model, prompt_id, Step::ZeroShot), compose_zero_shot(x, self.prompts))
            .await?;
        Ok(ControlTranscript {
            model: model.to_string(),
            prompt_id: prompt_id.to_string(),
            y_c: out.content,
            usage: out.usage,
            empty: out.empty,
        })
    }
}
