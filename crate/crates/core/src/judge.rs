//! Pairwise oracle judging with presentation-order debiasing.
//!
//! Each (model response, control response) pair is judged twice, once with
//! each response shown first. Each ordering yields a relative score
//! `s_m / s_c`; the prompt's score is the mean of the two.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{CompletionRequest, Gateway, GatewayError};
use crate::params::GenerationParams;
use crate::prompts::PromptSet;

pub const MAX_SCORE: f64 = 10.0;

/// Which response the oracle saw first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    ModelFirst,
    ControlFirst,
}

impl Order {
    pub fn as_str(&self) -> &'static str {
        match self {
            Order::ModelFirst => "model_first",
            Order::ControlFirst => "control_first",
        }
    }
}

/// Which candidate response is being judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    ZeroShot,
    Refined,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::ZeroShot => "zero_shot",
            Variant::Refined => "refined",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Model,
    Control,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JudgeError {
    #[error("cannot parse judgment ({reason}): {raw:?}")]
    JudgmentParse { raw: String, reason: String },
    #[error("score {value} outside [0, 10] in {raw:?}")]
    ScoreOutOfRange { value: f64, raw: String },
    #[error("control score is zero")]
    ZeroControlScore,
    #[error("no usable judgment for prompt {prompt_id}: {reasons}")]
    JudgmentUnavailable { prompt_id: String, reasons: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedJudgment {
    pub score_first: f64,
    pub score_second: f64,
    pub explanation: String,
    pub raw_first_line: String,
    /// The scores were comma-separated rather than space-separated.
    pub lenient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseJudgment {
    pub prompt_id: String,
    pub first_label: Slot,
    pub second_label: Slot,
    pub score_first: f64,
    pub score_second: f64,
    pub explanation: String,
    pub raw_first_line: String,
    #[serde(default)]
    pub lenient: bool,
}

impl PairwiseJudgment {
    pub fn new(prompt_id: &str, ordering: Order, parsed: ParsedJudgment) -> Self {
        let (first_label, second_label) = match ordering {
            Order::ModelFirst => (Slot::Model, Slot::Control),
            Order::ControlFirst => (Slot::Control, Slot::Model),
        };
        PairwiseJudgment {
            prompt_id: prompt_id.to_string(),
            first_label,
            second_label,
            score_first: parsed.score_first,
            score_second: parsed.score_second,
            explanation: parsed.explanation,
            raw_first_line: parsed.raw_first_line,
            lenient: parsed.lenient,
        }
    }

    pub fn ordering(&self) -> Order {
        match self.first_label {
            Slot::Model => Order::ModelFirst,
            Slot::Control => Order::ControlFirst,
        }
    }

    pub fn s_m(&self) -> f64 {
        if self.first_label == Slot::Model {
            self.score_first
        } else {
            self.score_second
        }
    }

    pub fn s_c(&self) -> f64 {
        if self.first_label == Slot::Control {
            self.score_first
        } else {
            self.score_second
        }
    }

    /// The instruction asks for 1..10; a zero usually means the judge misbehaved.
    pub fn has_zero_score(&self) -> bool {
        self.score_first == 0.0 || self.score_second == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasedScore {
    pub prompt_id: String,
    /// Mean model score over the usable orderings.
    pub s_m: f64,
    /// Mean control score over the usable orderings.
    pub s_c: f64,
    /// Relative score with the model shown first.
    pub s_r_ab: Option<f64>,
    /// Relative score with the control shown first.
    pub s_r_ba: Option<f64>,
    pub s_r: f64,
    /// Only one ordering was usable.
    pub partial: bool,
}

pub fn relative_score(s_m: f64, s_c: f64) -> Result<f64, JudgeError> {
    if s_c == 0.0 {
        return Err(JudgeError::ZeroControlScore);
    }
    Ok(s_m / s_c)
}

/// Rendered evaluation prompt plus flags for empty response slots.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedEval {
    pub text: String,
    pub empty_slots: [bool; 2],
}

pub fn render_eval_prompt(question: &str, first: &str, second: &str, prompts: &PromptSet) -> RenderedEval {
    let text = format!(
        "[Question]\n{question}\n\n\
         [The Start of Assistant 1's Answer]\n{first}\n\n[The End of Assistant 1's Answer]\n\n\
         [The Start of Assistant 2's Answer]\n{second}\n\n[The End of Assistant 2's Answer]\n\n\
         [System]\n{}",
        prompts.eval
    );
    RenderedEval {
        text,
        empty_slots: [first.trim().is_empty(), second.trim().is_empty()],
    }
}

fn is_score_token(tok: &str) -> bool {
    let (int, frac) = match tok.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (tok, None),
    };
    let digits = |s: &str| s.bytes().all(|b| b.is_ascii_digit());
    match frac {
        None => !int.is_empty() && digits(int),
        Some(f) => (!int.is_empty() || !f.is_empty()) && digits(int) && digits(f),
    }
}

/// Parses oracle output: the first nonblank line must hold exactly two
/// numbers separated by whitespace (commas accepted, flagged `lenient`);
/// everything after that line is the explanation.
pub fn parse_judgment(raw: &str) -> Result<ParsedJudgment, JudgeError> {
    let parse_err = |reason: &str| JudgeError::JudgmentParse {
        raw: raw.to_string(),
        reason: reason.to_string(),
    };
    let mut rest = raw;
    let first_line = loop {
        if rest.is_empty() {
            return Err(parse_err("no nonblank line"));
        }
        let (line, tail) = match rest.find('\n') {
            Some(i) => (&rest[..i], &rest[i + 1..]),
            None => (rest, ""),
        };
        rest = tail;
        if !line.trim().is_empty() {
            break line.trim();
        }
    };
    let lenient = first_line.contains(',');
    let normalized = first_line.replace(',', " ");
    let tokens: Vec<&str> = normalized.split_whitespace().collect();
    if tokens.len() != 2 {
        return Err(parse_err("first line must hold exactly two values"));
    }
    if !tokens.iter().all(|t| is_score_token(t)) {
        return Err(parse_err("scores must be plain decimal numbers"));
    }
    let mut scores = [0.0; 2];
    for (slot, tok) in scores.iter_mut().zip(&tokens) {
        let v: f64 = tok.parse().map_err(|_| parse_err("unparseable number"))?;
        if !(0.0..=MAX_SCORE).contains(&v) {
            return Err(JudgeError::ScoreOutOfRange {
                value: v,
                raw: raw.to_string(),
            });
        }
        *slot = v;
    }
    Ok(ParsedJudgment {
        score_first: scores[0],
        score_second: scores[1],
        explanation: rest.trim().to_string(),
        raw_first_line: first_line.to_string(),
        lenient,
    })
}

/// Builds the oracle request for one presentation order.
pub fn eval_request(
    oracle: &str,
    params: &GenerationParams,
    question: &str,
    model_response: &str,
    control_response: &str,
    ordering: Order,
    prompts: &PromptSet,
) -> CompletionRequest {
    let (first, second) = match ordering {
        Order::ModelFirst => (model_response, control_response),
        Order::ControlFirst => (control_response, model_response),
    };
    let rendered = render_eval_prompt(question, first, second, prompts);
    if rendered.empty_slots.iter().any(|e| *e) {
        log::warn!("judging an empty response ({} ordering)", ordering.as_str());
    }
    CompletionRequest::user(oracle, rendered.text, params)
}

#[allow(clippy::too_many_arguments)]
pub async fn judge_ordered(
    gateway: &Gateway,
    oracle: &str,
    params: &GenerationParams,
    prompt_id: &str,
    question: &str,
    model_response: &str,
    control_response: &str,
    ordering: Order,
    prompts: &PromptSet,
) -> Result<PairwiseJudgment, JudgeError> {
    let req = eval_request(oracle, params, question, model_response, control_response, ordering, prompts);
    let resp = gateway.send_completion(&req).await?;
    let parsed = parse_judgment(&resp.content)?;
    Ok(PairwiseJudgment::new(prompt_id, ordering, parsed))
}

/// Judges both orderings (concurrently) and combines them.
#[allow(clippy::too_many_arguments)]
pub async fn judge_debiased(
    gateway: &Gateway,
    oracle: &str,
    params: &GenerationParams,
    prompt_id: &str,
    question: &str,
    model_response: &str,
    control_response: &str,
    prompts: &PromptSet,
) -> Result<DebiasedScore, JudgeError> {
    let run = |ordering| {
        judge_ordered(
            gateway,
            oracle,
            params,
            prompt_id,
            question,
            model_response,
            control_response,
            ordering,
            prompts,
        )
    };
    let (ab, ba) = futures::join!(run(Order::ModelFirst), run(Order::ControlFirst));
    let keep = |r: Result<PairwiseJudgment, JudgeError>| -> Result<Result<PairwiseJudgment, JudgeError>, JudgeError> {
        match r {
            Err(JudgeError::Gateway(e)) => Err(JudgeError::Gateway(e)),
            other => Ok(other),
        }
    };
    let (ab, ba) = (keep(ab)?, keep(ba)?);
    combine_orderings(prompt_id, ab, ba)
}

/// Combines per-ordering outcomes. Failed orderings are logged and skipped;
/// if neither ordering is usable the prompt has no score.
pub fn combine_orderings(
    prompt_id: &str,
    model_first: Result<PairwiseJudgment, JudgeError>,
    control_first: Result<PairwiseJudgment, JudgeError>,
) -> Result<DebiasedScore, JudgeError> {
    let mut reasons = Vec::new();
    let mut usable = |label: &str, r: Result<PairwiseJudgment, JudgeError>| -> Option<(f64, PairwiseJudgment)> {
        let j = match r {
            Ok(j) => j,
            Err(e) => {
                reasons.push(format!("{label}: {e}"));
                return None;
            }
        };
        match relative_score(j.s_m(), j.s_c()) {
            Ok(s) => Some((s, j)),
            Err(e) => {
                log::warn!("prompt {prompt_id}, {label}: {e}; ordering skipped");
                reasons.push(format!("{label}: {e}"));
                None
            }
        }
    };
    let ab = usable("model_first", model_first);
    let ba = usable("control_first", control_first);
    let used: Vec<&(f64, PairwiseJudgment)> = ab.iter().chain(ba.iter()).collect();
    if used.is_empty() {
        return Err(JudgeError::JudgmentUnavailable {
            prompt_id: prompt_id.to_string(),
            reasons: reasons.join("; "),
        });
    }
    let n = used.len() as f64;
    let s_r = used.iter().map(|(s, _)| s).sum::<f64>() / n;
    let s_m = used.iter().map(|(_, j)| j.s_m()).sum::<f64>() / n;
    let s_c = used.iter().map(|(_, j)| j.s_c()).sum::<f64>() / n;
    if used.len() == 1 {
        log::warn!("prompt {prompt_id}: only one ordering usable ({})", reasons.join("; "));
    }
    Ok(DebiasedScore {
        prompt_id: prompt_id.to_string(),
        s_m,
        s_c,
        s_r_ab: ab.as_ref().map(|(s, _)| *s),
        s_r_ba: ba.as_ref().map(|(s, _)| *s),
        s_r,
        partial: used.len() == 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_basic() {
        let p = parse_judgment("7 8\nAssistant 2 was more detailed.").unwrap();
        assert_eq!((p.score_first, p.score_second), (7.0, 8.0));
        assert_eq!(p.explanation, "Assistant 2 was more detailed.");
        assert!(!p.lenient);
        let p = parse_judgment("9.5 9\nok").unwrap();
        assert_eq!((p.score_first, p.score_second), (9.5, 9.0));
    }

    #[test]
    fn parse_tolerates_blank_lines_and_commas() {
        let p = parse_judgment("\n\n  8   6  \r\n\nBecause.\n").unwrap();
        assert_eq!((p.score_first, p.score_second), (8.0, 6.0));
        assert_eq!(p.explanation, "Because.");
        assert_eq!(p.raw_first_line, "8   6");
        let p = parse_judgment("8, 6\nx").unwrap();
        assert!(p.lenient);
        assert_eq!((p.score_first, p.score_second), (8.0, 6.0));
        let p = parse_judgment("10,0").unwrap();
        assert_eq!((p.score_first, p.score_second), (10.0, 0.0));
        assert_eq!(p.explanation, "");
    }

    #[test]
    fn parse_rejects_prose_and_range() {
        assert!(matches!(parse_judgment("The scores are 7 and 8"), Err(JudgeError::JudgmentParse { .. })));
        assert!(matches!(parse_judgment(""), Err(JudgeError::JudgmentParse { .. })));
        assert!(matches!(parse_judgment("7\n8"), Err(JudgeError::JudgmentParse { .. })));
        assert!(matches!(parse_judgment("7 8 9"), Err(JudgeError::JudgmentParse { .. })));
        assert!(matches!(parse_judgment("-1 8"), Err(JudgeError::JudgmentParse { .. })));
        assert!(matches!(parse_judgment("nan 8"), Err(JudgeError::JudgmentParse { .. })));
        assert!(matches!(parse_judgment("1e1 8"), Err(JudgeError::JudgmentParse { .. })));
        match parse_judgment("11 3\nwhy") {
            Err(JudgeError::ScoreOutOfRange { value, .. }) => assert_eq!(value, 11.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn render_orders_blocks() {
        let p = PromptSet::default();
        let ab = render_eval_prompt("Q?", "alpha", "beta", &p);
        let ba = render_eval_prompt("Q?", "beta", "alpha", &p);
        assert_ne!(ab.text, ba.text);
        assert_eq!(ab.text.replace("alpha", "\u{1}").replace("beta", "alpha").replace('\u{1}', "beta"), ba.text);
        assert!(ab.text.starts_with("[Question]\nQ?\n"));
        assert!(ab.text.ends_with(&p.eval));
        assert!(ab.text.find("alpha").unwrap() < ab.text.find("beta").unwrap());
        let empty = render_eval_prompt("Q?", "", "beta", &p);
        assert_eq!(empty.empty_slots, [true, false]);
        assert!(empty.text.contains("[The Start of Assistant 1's Answer]\n\n\n[The End of Assistant 1's Answer]"));
    }

    fn judged(ordering: Order, first: f64, second: f64) -> PairwiseJudgment {
        PairwiseJudgment::new(
            "q",
            ordering,
            ParsedJudgment {
                score_first: first,
                score_second: second,
                explanation: String::new(),
                raw_first_line: format!("{first} {second}"),
                lenient: false,
            },
        )
    }

    #[test]
    fn labels_follow_ordering() {
        let a = judged(Order::ModelFirst, 8.0, 7.0);
        assert_eq!((a.s_m(), a.s_c()), (8.0, 7.0));
        let b = judged(Order::ControlFirst, 8.0, 7.0);
        assert_eq!((b.s_m(), b.s_c()), (7.0, 8.0));
        assert_eq!(b.ordering(), Order::ControlFirst);
    }

    #[test]
    fn relative_score_cases() {
        assert!((relative_score(8.0, 7.0).unwrap() - 8.0 / 7.0).abs() < 1e-15);
        assert_eq!(relative_score(7.0, 7.0).unwrap(), 1.0);
        assert_eq!(relative_score(0.0, 7.0).unwrap(), 0.0);
        assert_eq!(relative_score(5.0, 0.0).unwrap_err(), JudgeError::ZeroControlScore);
    }

    #[test]
    fn debias_averages_orderings() {
        let d = combine_orderings("q", Ok(judged(Order::ModelFirst, 8.0, 7.0)), Ok(judged(Order::ControlFirst, 8.0, 7.0))).unwrap();
        assert_eq!(d.s_r_ab, Some(8.0 / 7.0));
        assert_eq!(d.s_r_ba, Some(7.0 / 8.0));
        assert!((d.s_r - 1.008_928_571_428_571_4).abs() < 1e-12);
        assert!(!d.partial);
        let same = combine_orderings("q", Ok(judged(Order::ModelFirst, 7.0, 7.0)), Ok(judged(Order::ControlFirst, 7.0, 7.0))).unwrap();
        assert_eq!(same.s_r, 1.0);
    }

    #[test]
    fn debias_partial_and_unavailable() {
        let bad = || Err(parse_judgment("garbage").unwrap_err());
        let d = combine_orderings("q", Ok(judged(Order::ModelFirst, 6.0, 8.0)), bad()).unwrap();
        assert!(d.partial);
        assert_eq!(d.s_r, 0.75);
        assert_eq!(d.s_r_ba, None);
        let zero_control = combine_orderings("q", Ok(judged(Order::ModelFirst, 6.0, 0.0)), Ok(judged(Order::ControlFirst, 8.0, 6.0))).unwrap();
        assert!(zero_control.partial);
        assert_eq!(zero_control.s_r, 0.75);
        assert!(matches!(combine_orderings("q", bad(), bad()), Err(JudgeError::JudgmentUnavailable { .. })));
    }

    proptest! {
        #[test]
        fn never_panics(s in "\\PC*") {
            let _ = parse_judgment(&s);
        }

        #[test]
        fn debiased_mean_ignores_execution_order(a in 1u8..=10, b in 1u8..=10, c in 1u8..=10, d in 1u8..=10) {
            let x = combine_orderings("q", Ok(judged(Order::ModelFirst, a as f64, b as f64)), Ok(judged(Order::ControlFirst, c as f64, d as f64))).unwrap();
            let y = combine_orderings("q", Ok(judged(Order::ModelFirst, a as f64, b as f64)), Ok(judged(Order::ControlFirst, c as f64, d as f64))).unwrap();
            prop_assert_eq!(x.s_r, y.s_r);
            // swapping which response was shown first never swaps the model/control assignment
            let first = judged(Order::ModelFirst, a as f64, b as f64);
            let swapped = judged(Order::ControlFirst, b as f64, a as f64);
            prop_assert_eq!(first.s_m(), swapped.s_m());
            prop_assert_eq!(first.s_c(), swapped.s_c());
        }
    }
}
