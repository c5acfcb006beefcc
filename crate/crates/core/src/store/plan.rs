use serde::{Deserialize, Serialize};

use super::EventKind;
use crate::judge::{Order, Variant};

/// One backend call's worth of work for a (model, prompt).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Step {
    ZeroShot,
    Critique { round: u32 },
    Refine { round: u32 },
    Judge { variant: Variant, ordering: Order },
}

impl Step {
    pub fn kind(&self) -> EventKind {
        match self {
            Step::ZeroShot => EventKind::ZeroShot,
            Step::Critique { .. } => EventKind::Critique,
            Step::Refine { .. } => EventKind::Refine,
            Step::Judge { .. } => EventKind::Judgment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WorkItem {
    pub model: String,
    pub prompt_id: String,
    pub step: Step,
}

/// The full work set of a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPlan {
    pub candidates: Vec<String>,
    pub control: Option<String>,
    pub prompt_ids: Vec<String>,
    pub iterations: u32,
    pub generate: bool,
    pub judge: bool,
}

impl RunPlan {
    /// Every work item, in execution order: per prompt the control's zero-shot
    /// then each candidate's procedure; then judgments per candidate and prompt.
    pub fn items(&self) -> Vec<WorkItem> {
        let mut out = Vec::new();
        let item = |model: &str, prompt_id: &str, step| WorkItem {
            model: model.to_string(),
            prompt_id: prompt_id.to_string(),
            step,
        };
        if self.generate {
            for p in &self.prompt_ids {
                if let Some(control) = &self.control {
                    out.push(item(control, p, Step::ZeroShot));
                }
                for m in &self.candidates {
                    out.push(item(m, p, Step::ZeroShot));
                    for round in 1..=self.iterations {
                        out.push(item(m, p, Step::Critique { round }));
                        out.push(item(m, p, Step::Refine { round }));
                    }
                }
            }
        }
        if self.judge {
            for m in &self.candidates {
                for p in &self.prompt_ids {
                    for variant in [Variant::ZeroShot, Variant::Refined] {
                        for ordering in [Order::ModelFirst, Order::ControlFirst] {
                            out.push(item(m, p, Step::Judge { variant, ordering }));
                        }
                    }
                }
            }
        }
        out
    }
}
