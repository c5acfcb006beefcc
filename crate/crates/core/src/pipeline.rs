//! Generation and judging over a run directory, resumable at any event.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{
    category_means, domain_delta, paired_domain_delta, token_change, total_refinement_performance, win_rate,
    CategoryScore, DomainDelta, TokenPair, WeightVector,
};
use crate::benchmark::{parse_benchmark, Benchmark, BenchmarkError, Category, TaskPrompt};
use crate::config::{Config, ConfigError};
use crate::engine::{Engine, EngineError, RefinementTranscript};
use crate::gateway::Gateway;
use crate::judge::{combine_orderings, eval_request, parse_judgment, DebiasedScore, Order, PairwiseJudgment, Variant};
use crate::params::GenerationParams;
use crate::prompts::PromptSet;
use crate::report::{refinement_table, Cell, ModelColumns, ReportTable};
use crate::store::{EventDraft, EventKind, RunEvent, RunPlan, RunStore, Step, StoreError, WorkItem, BENCHMARK_FILE};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Benchmark(#[from] BenchmarkError),
    #[error("run directory holds a different benchmark than the one requested")]
    BenchmarkChanged,
    #[error("run directory {0:?} has no benchmark copy")]
    MissingBenchmark(std::path::PathBuf),
    #[error("io at {path:?}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

/// Who plays which part in a run, and with what settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSetup {
    pub candidates: Vec<String>,
    pub control: String,
    pub oracle: String,
    pub prompts: PromptSet,
    pub params: GenerationParams,
    pub oracle_params: GenerationParams,
    pub iterations: u32,
}

impl RunSetup {
    pub fn from_config(cfg: &Config) -> Result<Self, ConfigError> {
        Ok(RunSetup {
            candidates: cfg.candidates().iter().map(|m| m.name.clone()).collect(),
            control: cfg.control()?.name.clone(),
            oracle: cfg.oracle()?.name.clone(),
            prompts: cfg.prompts.clone(),
            params: cfg.generation.clone(),
            oracle_params: cfg.oracle_params(),
            iterations: cfg.iterations,
        })
    }
}

/// Work counts for one pass over a plan.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub planned: usize,
    pub already_done: usize,
    pub completed: usize,
    /// Still pending after the pass (backend failures, or inputs missing).
    pub pending: usize,
}

pub fn new_run_id() -> String {
    let suffix: u32 = rand::random();
    format!("run-{}-{suffix:08x}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ"))
}

/// Opens (or creates) a run directory and pins the benchmark to it.
pub fn open_run(dir: &Path, config: &Config, benchmark: Option<&Benchmark>) -> Result<(RunStore, Benchmark), PipelineError> {
    let store = RunStore::open_or_create(dir, &new_run_id(), config.snapshot())?;
    let path = dir.join(BENCHMARK_FILE);
    let io = |source| PipelineError::Io {
        path: path.clone(),
        source,
    };
    let stored = if path.exists() {
        Some(parse_benchmark(&std::fs::read_to_string(&path).map_err(io)?)?)
    } else {
        None
    };
    let bench = match (stored, benchmark) {
        (Some(s), Some(b)) if &s != b => return Err(PipelineError::BenchmarkChanged),
        (Some(s), _) => s,
        (None, Some(b)) => {
            std::fs::write(&path, b.to_jsonl()).map_err(io)?;
            b.clone()
        }
        (None, None) => return Err(PipelineError::MissingBenchmark(dir.to_path_buf())),
    };
    Ok((store, bench))
}

pub struct Pipeline<'a> {
    pub setup: &'a RunSetup,
    pub benchmark: &'a Benchmark,
    pub gateway: &'a Gateway,
    pub store: &'a RunStore,
}

enum Unit<'b> {
    Control(&'b TaskPrompt),
    Candidate(&'b str, &'b TaskPrompt),
}

impl<'a> Pipeline<'a> {
    pub fn plan(&self, generate: bool, judge: bool) -> RunPlan {
        RunPlan {
            candidates: self.setup.candidates.clone(),
            control: Some(self.setup.control.clone()),
            prompt_ids: self.benchmark.prompts().iter().map(|p| p.id.clone()).collect(),
            iterations: self.setup.iterations,
            generate,
            judge,
        }
    }

    fn summarize(&self, plan: &RunPlan, before: usize) -> RunSummary {
        let planned = plan.items().len();
        let after = self.store.pending_work(plan).len();
        RunSummary {
            planned,
            already_done: planned - before,
            completed: before - after,
            pending: after,
        }
    }

    /// Zero-shot for the control and the full procedure for every candidate.
    /// `jobs` transcripts run at once; with `jobs == 1` the log order is fixed.
    pub async fn generate(&self, jobs: usize) -> Result<RunSummary, PipelineError> {
        let plan = self.plan(true, false);
        let before = self.store.pending_work(&plan).len();
        let engine = Engine::new(self.gateway, &self.setup.prompts, &self.setup.params).with_store(self.store);
        let mut units = Vec::new();
        for p in self.benchmark.prompts() {
            units.push(Unit::Control(p));
            for m in &self.setup.candidates {
                units.push(Unit::Candidate(m, p));
            }
        }
        let engine = &engine;
        let results: Vec<Result<(), EngineError>> = stream::iter(units)
            .map(|u| async move {
                match u {
                    Unit::Control(p) => engine.run_control(&self.setup.control, &p.id, &p.text).await.map(drop),
                    Unit::Candidate(m, p) => engine.run_procedure(m, &p.id, &p.text, self.setup.iterations).await.map(drop),
                }
            })
            .buffer_unordered(jobs.max(1))
            .collect()
            .await;
        for r in results {
            match r {
                Ok(()) => {}
                Err(EngineError::Store(e)) => return Err(e.into()),
                Err(e) => log::warn!("{e}"),
            }
        }
        Ok(self.summarize(&plan, before))
    }

    fn response_for(&self, model: &str, prompt_id: &str, step: Step) -> Option<String> {
        self.store
            .completed(&WorkItem {
                model: model.to_string(),
                prompt_id: prompt_id.to_string(),
                step,
            })
            .map(|e| e.content)
    }

    async fn judge_item(&self, item: WorkItem) -> Result<(), StoreError> {
        let Step::Judge { variant, ordering } = item.step else {
            return Ok(());
        };
        let model_step = match variant {
            Variant::ZeroShot => Step::ZeroShot,
            Variant::Refined => Step::Refine {
                round: self.setup.iterations,
            },
        };
        let model_resp = self.response_for(&item.model, &item.prompt_id, model_step);
        let control_resp = self.response_for(&self.setup.control, &item.prompt_id, Step::ZeroShot);
        let (Some(model_resp), Some(control_resp), Some(prompt)) =
            (model_resp, control_resp, self.benchmark.get(&item.prompt_id))
        else {
            log::warn!("{} / {}: responses missing, judgment skipped", item.model, item.prompt_id);
            return Ok(());
        };
        let req = eval_request(
            &self.setup.oracle,
            &self.setup.oracle_params,
            &prompt.text,
            &model_resp,
            &control_resp,
            ordering,
            &self.setup.prompts,
        );
        match self.gateway.send_completion(&req).await {
            Ok(resp) => {
                let mut draft = EventDraft::for_step(&item, resp.content.clone(), resp.usage);
                draft.oracle = Some(self.setup.oracle.clone());
                self.store.append(draft)?;
                if let Err(e) = parse_judgment(&resp.content) {
                    log::warn!("{} / {} ({}): {e}", item.model, item.prompt_id, ordering.as_str());
                    let mut failure = EventDraft::failure(&item, e.to_string());
                    failure.oracle = Some(self.setup.oracle.clone());
                    self.store.append(failure)?;
                }
            }
            Err(e) => {
                log::warn!("{} / {}: oracle call failed: {e}", item.model, item.prompt_id);
                let mut failure = EventDraft::failure(&item, e.to_string());
                failure.oracle = Some(self.setup.oracle.clone());
                self.store.append(failure)?;
            }
        }
        Ok(())
    }

    /// Both orderings of both variants for every candidate and prompt whose
    /// responses exist. A stored raw judgment counts as done even when it
    /// does not parse; the parse failure is logged next to it.
    pub async fn judge(&self, jobs: usize) -> Result<RunSummary, PipelineError> {
        let plan = self.plan(false, true);
        let pending = self.store.pending_work(&plan);
        let before = pending.len();
        let results: Vec<Result<(), StoreError>> = stream::iter(pending)
            .map(|item| self.judge_item(item))
            .buffer_unordered(jobs.max(1))
            .collect()
            .await;
        results.into_iter().collect::<Result<(), _>>()?;
        Ok(self.summarize(&plan, before))
    }
}

/// Scores for one candidate over a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub model: String,
    pub zero_shot: Vec<DebiasedScore>,
    pub refined: Vec<DebiasedScore>,
    pub zero_means: Vec<CategoryScore>,
    pub refined_means: Vec<CategoryScore>,
    pub deltas: Vec<DomainDelta>,
    pub paired_deltas: Vec<DomainDelta>,
    pub win_rate_zero: Option<f64>,
    pub win_rate_refined: Option<f64>,
    /// Percent change in completion tokens, zero-shot to final refinement.
    pub token_change: Vec<(Category, Option<f64>)>,
    /// Prompt/variant pairs left out of the means, with the reason.
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunScores {
    pub models: Vec<ModelScores>,
}

fn judgment_of(ev: &RunEvent) -> Result<PairwiseJudgment, crate::judge::JudgeError> {
    let parsed = parse_judgment(&ev.content)?;
    Ok(PairwiseJudgment::new(&ev.prompt_id, ev.ordering.unwrap_or(Order::ModelFirst), parsed))
}

/// Debiased scores, category means, deltas, win rates and token growth,
/// computed from a run's events alone.
pub fn score_events(events: &[RunEvent], benchmark: &Benchmark, setup: &RunSetup) -> RunScores {
    let mut judgments: HashMap<(&str, &str, Variant, Order), &RunEvent> = HashMap::new();
    for ev in events.iter().filter(|e| e.kind == EventKind::Judgment) {
        if let (Some(v), Some(o)) = (ev.variant, ev.ordering) {
            judgments.entry((ev.model.as_str(), ev.prompt_id.as_str(), v, o)).or_insert(ev);
        }
    }
    let categories: Vec<&Category> = benchmark.categories().iter().map(|c| &c.name).collect();
    let mut models = Vec::new();
    for model in &setup.candidates {
        let mut excluded = Vec::new();
        let mut scores: BTreeMap<Variant, Vec<DebiasedScore>> = BTreeMap::new();
        let mut per_prompt: BTreeMap<Variant, Vec<Vec<PairwiseJudgment>>> = BTreeMap::new();
        for p in benchmark.prompts() {
            for variant in [Variant::ZeroShot, Variant::Refined] {
                let get = |o| judgments.get(&(model.as_str(), p.id.as_str(), variant, o)).copied();
                let (ab, ba) = (get(Order::ModelFirst), get(Order::ControlFirst));
                if ab.is_none() && ba.is_none() {
                    continue;
                }
                let ab = ab.map(judgment_of).unwrap_or(Err(crate::judge::JudgeError::JudgmentParse {
                    raw: String::new(),
                    reason: "not judged".into(),
                }));
                let ba = ba.map(judgment_of).unwrap_or(Err(crate::judge::JudgeError::JudgmentParse {
                    raw: String::new(),
                    reason: "not judged".into(),
                }));
                per_prompt
                    .entry(variant)
                    .or_default()
                    .push(ab.iter().chain(ba.iter()).cloned().collect());
                match combine_orderings(&p.id, ab, ba) {
                    Ok(s) => scores.entry(variant).or_default().push(s),
                    Err(e) => excluded.push(format!("{} {}: {e}", p.id, variant.as_str())),
                }
            }
        }
        let take = |v| scores.get(&v).cloned().unwrap_or_default();
        let (zero, refined) = (take(Variant::ZeroShot), take(Variant::Refined));
        let category_of = |id: &str| benchmark.category_of(id);
        let zero_means = category_means(categories.iter().copied(), Variant::ZeroShot, &zero, category_of);
        let refined_means = category_means(categories.iter().copied(), Variant::Refined, &refined, category_of);
        let deltas = zero_means
            .iter()
            .filter_map(|z| {
                let r = refined_means.iter().find(|r| r.category == z.category)?;
                domain_delta(z, r).ok()
            })
            .collect();
        let paired_deltas = categories
            .iter()
            .filter_map(|c| {
                let in_cat = |s: &&DebiasedScore| benchmark.category_of(&s.prompt_id) == Some(*c);
                let z: Vec<DebiasedScore> = zero.iter().filter(in_cat).cloned().collect();
                let r: Vec<DebiasedScore> = refined.iter().filter(in_cat).cloned().collect();
                paired_domain_delta(c, &z, &r).ok()
            })
            .collect();
        let rate = |v| per_prompt.get(&v).and_then(|j| win_rate(j).ok());
        let token_change = categories
            .iter()
            .map(|c| {
                let pairs: Vec<TokenPair> = benchmark
                    .prompts()
                    .iter()
                    .filter(|p| &&p.category == c)
                    .filter_map(|p| {
                        RefinementTranscript::from_events(model, &p.id, events, setup.iterations, &setup.params)
                    })
                    .map(|t| TokenPair {
                        zero_shot: t.zero_shot_tokens(),
                        refined: t.refined_tokens(),
                    })
                    .collect();
                ((*c).clone(), token_change(&pairs).ok())
            })
            .collect();
        models.push(ModelScores {
            model: model.clone(),
            win_rate_zero: rate(Variant::ZeroShot),
            win_rate_refined: rate(Variant::Refined),
            zero_shot: zero,
            refined,
            zero_means,
            refined_means,
            deltas,
            paired_deltas,
            token_change,
            excluded,
        });
    }
    RunScores { models }
}

fn pairs(means: &[CategoryScore]) -> Vec<(Category, f64)> {
    means.iter().map(|m| (m.category.clone(), m.mean_relative_pct)).collect()
}

impl RunScores {
    /// Category means per model (zero-shot and refined), as percent of control.
    pub fn refinement_table(&self, weights: &WeightVector, weights_label: &str) -> ReportTable {
        let cols: Vec<ModelColumns> = self
            .models
            .iter()
            .map(|m| ModelColumns {
                model: m.model.clone(),
                zero_shot: pairs(&m.zero_means),
                refined: pairs(&m.refined_means),
            })
            .collect();
        refinement_table("Scores as % of control", &cols, weights, weights_label)
    }

    /// Per-category detail for one model.
    pub fn detail_table(&self, m: &ModelScores) -> ReportTable {
        let mut t = ReportTable::new(
            format!("{}: refinement by category", m.model),
            ["Category", "n", "Zero-shot", "Refined", "Change", "Paired change", "Token change %"]
                .map(String::from)
                .to_vec(),
        );
        for (c, tokens) in &m.token_change {
            let z = m.zero_means.iter().find(|s| &s.category == c);
            let r = m.refined_means.iter().find(|s| &s.category == c);
            let d = m.deltas.iter().find(|d| &d.category == c);
            let pd = m.paired_deltas.iter().find(|d| &d.category == c);
            let n = match (z, r) {
                (Some(z), Some(r)) if z.n == r.n => z.n.to_string(),
                (Some(z), Some(r)) => format!("{}/{}", z.n, r.n),
                (Some(z), None) => z.n.to_string(),
                (None, Some(r)) => r.n.to_string(),
                (None, None) => "0".into(),
            };
            t.push(vec![
                Cell::text(c.as_str()),
                Cell::text(n),
                z.map_or(Cell::Empty, |s| Cell::Number(s.mean_relative_pct)),
                r.map_or(Cell::Empty, |s| Cell::Number(s.mean_relative_pct)),
                d.map_or(Cell::Empty, |d| Cell::Delta(d.delta_pct)),
                pd.map_or(Cell::Empty, |d| Cell::Delta(d.delta_pct)),
                tokens.map_or(Cell::Empty, Cell::Delta),
            ]);
        }
        t
    }

    /// Win rates and weighted total refinement per model.
    pub fn summary_table(&self, weights: &WeightVector) -> ReportTable {
        let mut t = ReportTable::new(
            "Summary",
            ["Model", "Win rate zero-shot %", "Win rate refined %", "Total refinement", "Excluded"]
                .map(String::from)
                .to_vec(),
        );
        for m in &self.models {
            let pct = |r: Option<f64>| r.map_or(Cell::Empty, |r| Cell::Number(100.0 * r));
            t.push(vec![
                Cell::text(m.model.clone()),
                pct(m.win_rate_zero),
                pct(m.win_rate_refined),
                total_refinement_performance(&m.deltas, weights).map_or(Cell::Empty, Cell::Delta),
                Cell::text(m.excluded.len().to_string()),
            ]);
        }
        t
    }
}
