//! Append-only, resumable run log.
//!
//! A run directory holds `manifest.json` (run id plus a config snapshot),
//! `events.jsonl` and, by default, a `fixtures/` directory. Each event line is
//! `<checksum> <json>`, where the checksum is the first 16 hex digits of the
//! SHA-256 of the JSON text. A damaged final line is treated as a crash
//! artifact: it is dropped with a warning and cut from the file on open.

mod ledger;
mod plan;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::TokenUsage;
use crate::judge::{Order, Variant};

pub use ledger::{CostLedger, Price, PriceTable, SharedLedger, UsageTotals};
pub use plan::{RunPlan, Step, WorkItem};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const FIXTURES_DIR: &str = "fixtures";
pub const BENCHMARK_FILE: &str = "benchmark.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ZeroShot,
    Critique,
    Refine,
    Judgment,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub run_id: String,
    pub seq: u64,
    pub kind: EventKind,
    /// Generating model; for judgments, the candidate being judged.
    pub model: String,
    pub prompt_id: String,
    /// Critique/refine round, starting at 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordering: Option<Order>,
    /// Oracle model name on judgment events.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<String>,
    /// Phase that failed, on failure events.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<EventKind>,
    pub content: String,
    pub usage: TokenUsage,
    pub timestamp: DateTime<Utc>,
}

impl RunEvent {
    /// The work step this event completes, or for failures the step that failed.
    pub fn step(&self) -> Option<Step> {
        let kind = match self.kind {
            EventKind::Failure => self.failed?,
            k => k,
        };
        match kind {
            EventKind::ZeroShot => Some(Step::ZeroShot),
            EventKind::Critique => Some(Step::Critique { round: self.round? }),
            EventKind::Refine => Some(Step::Refine { round: self.round? }),
            EventKind::Judgment => Some(Step::Judge {
                variant: self.variant?,
                ordering: self.ordering?,
            }),
            EventKind::Failure => None,
        }
    }

    pub fn is_failure(&self) -> bool {
        self.kind == EventKind::Failure
    }

    pub fn work_item(&self) -> Option<WorkItem> {
        Some(WorkItem {
            model: self.model.clone(),
            prompt_id: self.prompt_id.clone(),
            step: self.step()?,
        })
    }
}

/// An event before the store assigns run id, sequence number and timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct EventDraft {
    pub kind: EventKind,
    pub model: String,
    pub prompt_id: String,
    pub round: Option<u32>,
    pub variant: Option<Variant>,
    pub ordering: Option<Order>,
    pub oracle: Option<String>,
    pub failed: Option<EventKind>,
    pub content: String,
    pub usage: TokenUsage,
}

impl EventDraft {
    pub fn new(kind: EventKind, model: &str, prompt_id: &str, content: String, usage: TokenUsage) -> Self {
        EventDraft {
            kind,
            model: model.to_string(),
            prompt_id: prompt_id.to_string(),
            round: None,
            variant: None,
            ordering: None,
            oracle: None,
            failed: None,
            content,
            usage,
        }
    }

    /// Draft for a step's output.
    pub fn for_step(item: &WorkItem, content: String, usage: TokenUsage) -> Self {
        let mut d = EventDraft::new(item.step.kind(), &item.model, &item.prompt_id, content, usage);
        d.apply_step(item.step);
        d
    }

    /// Failure record for a step.
    pub fn failure(item: &WorkItem, message: String) -> Self {
        let mut d = EventDraft::new(
            EventKind::Failure,
            &item.model,
            &item.prompt_id,
            message,
            TokenUsage::default(),
        );
        d.failed = Some(item.step.kind());
        d.apply_step(item.step);
        d
    }

    fn apply_step(&mut self, step: Step) {
        match step {
            Step::ZeroShot => {}
            Step::Critique { round } | Step::Refine { round } => self.round = Some(round),
            Step::Judge { variant, ordering } => {
                self.variant = Some(variant);
                self.ordering = Some(ordering);
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("run store i/o at {path:?}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt run log at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("sequence regression: got seq {got} after {last}")]
    SequenceRegression { last: u64, got: u64 },
    #[error("event belongs to run {got:?}, store is {expected:?}")]
    RunMismatch { expected: String, got: String },
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("run directory {0:?} already holds a run")]
    AlreadyExists(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Durability {
    /// Flush to the OS before acknowledging; survives process death.
    Flush,
    /// Also fsync; survives power loss.
    #[default]
    Sync,
}

/// Result of reading an events file.
#[derive(Debug, Clone, Default)]
pub struct LoadedLog {
    pub events: Vec<RunEvent>,
    /// Byte length of the valid prefix.
    pub valid_len: u64,
    pub dropped_tail: bool,
}

pub fn line_checksum(json: &str) -> String {
    hex::encode(&Sha256::digest(json.as_bytes())[..8])
}

pub fn encode_line(event: &RunEvent) -> String {
    let json = serde_json::to_string(event).expect("event serializes");
    format!("{} {}\n", line_checksum(&json), json)
}

fn decode_line(line: &str) -> Result<RunEvent, String> {
    let (sum, json) = line.split_once(' ').ok_or("missing checksum separator")?;
    if line_checksum(json) != sum {
        return Err("checksum mismatch".into());
    }
    serde_json::from_str(json).map_err(|e| e.to_string())
}

/// Parses an events file. Damage on the final line is tolerated and reported
/// through `dropped_tail`; damage anywhere else is `CorruptLog`.
pub fn parse_events(text: &str) -> Result<LoadedLog, StoreError> {
    let mut out = LoadedLog::default();
    let mut offset = 0u64;
    let mut rest = text;
    let mut line_no = 0;
    while !rest.is_empty() {
        line_no += 1;
        let (line, complete, consumed) = match rest.find('\n') {
            Some(i) => (&rest[..i], true, i + 1),
            None => (rest, false, rest.len()),
        };
        let is_last = consumed == rest.len();
        let parsed = if complete { decode_line(line) } else { Err("unterminated line".into()) };
        match parsed {
            Ok(ev) => {
                if let Some(prev) = out.events.last() {
                    if ev.seq <= prev.seq {
                        return Err(StoreError::CorruptLog {
                            line: line_no,
                            reason: format!("seq {} does not follow {}", ev.seq, prev.seq),
                        });
                    }
                }
                out.events.push(ev);
                offset += consumed as u64;
                out.valid_len = offset;
            }
            Err(reason) if is_last => {
                log::warn!("dropping damaged final run-log line {line_no}: {reason}");
                out.dropped_tail = true;
            }
            Err(reason) => return Err(StoreError::CorruptLog { line: line_no, reason }),
        }
        rest = &rest[consumed..];
    }
    Ok(out)
}

pub fn load_events(dir: &Path) -> Result<LoadedLog, StoreError> {
    let path = dir.join(EVENTS_FILE);
    match std::fs::read(&path) {
        Ok(bytes) => parse_events(&String::from_utf8_lossy(&bytes)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(LoadedLog::default()),
        Err(e) => Err(io_err(&path)(e)),
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, StoreError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| StoreError::Manifest(e.to_string()))
}

type CompletedKey = (String, String, Step);

struct Writer {
    file: File,
    last_seq: Option<u64>,
    completed: HashMap<CompletedKey, RunEvent>,
}

/// Single-writer handle on a run directory. Appends are serialized internally,
/// so one store can be shared by many concurrent producers.
pub struct RunStore {
    dir: PathBuf,
    manifest: Manifest,
    durability: Durability,
    writer: Mutex<Writer>,
}

impl RunStore {
    pub fn create(dir: &Path, run_id: &str, config: serde_json::Value) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            return Err(StoreError::AlreadyExists(dir.to_path_buf()));
        }
        let manifest = Manifest {
            run_id: run_id.to_string(),
            created_at: Utc::now(),
            config,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| StoreError::Manifest(e.to_string()))?;
        std::fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
        Self::open(dir)
    }

    /// Opens an existing run, cutting any damaged tail from the events file.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let manifest = read_manifest(dir)?;
        let loaded = load_events(dir)?;
        let path = dir.join(EVENTS_FILE);
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .write(true)
            .truncate(false)
            .open(&path)
            .map_err(io_err(&path))?;
        if loaded.dropped_tail {
            file.set_len(loaded.valid_len).map_err(io_err(&path))?;
        }
        file.seek(SeekFrom::End(0)).map_err(io_err(&path))?;
        let mut completed = HashMap::new();
        for ev in &loaded.events {
            if let Some(item) = ev.work_item().filter(|_| !ev.is_failure()) {
                completed.insert((item.model, item.prompt_id, item.step), ev.clone());
            }
        }
        Ok(RunStore {
            dir: dir.to_path_buf(),
            durability: Durability::default(),
            writer: Mutex::new(Writer {
                file,
                last_seq: loaded.events.last().map(|e| e.seq),
                completed,
            }),
            manifest,
        })
    }

    pub fn open_or_create(dir: &Path, run_id: &str, config: serde_json::Value) -> Result<Self, StoreError> {
        if dir.join(MANIFEST_FILE).exists() {
            Self::open(dir)
        } else {
            Self::create(dir, run_id, config)
        }
    }

    pub fn with_durability(mut self, durability: Durability) -> Self {
        self.durability = durability;
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn run_id(&self) -> &str {
        &self.manifest.run_id
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn fixtures_dir(&self) -> PathBuf {
        self.dir.join(FIXTURES_DIR)
    }

    /// Appends a fully-formed event. Its sequence number must exceed the last one.
    pub fn append_event(&self, event: RunEvent) -> Result<u64, StoreError> {
        let mut w = self.writer.lock().expect("run store poisoned");
        self.write_locked(&mut w, event)
    }

    /// Assigns run id, the next sequence number and a timestamp, then appends.
    pub fn append(&self, draft: EventDraft) -> Result<RunEvent, StoreError> {
        let mut w = self.writer.lock().expect("run store poisoned");
        let event = RunEvent {
            run_id: self.manifest.run_id.clone(),
            seq: w.last_seq.map_or(0, |s| s + 1),
            kind: draft.kind,
            model: draft.model,
            prompt_id: draft.prompt_id,
            round: draft.round,
            variant: draft.variant,
            ordering: draft.ordering,
            oracle: draft.oracle,
            failed: draft.failed,
            content: draft.content,
            usage: draft.usage,
            timestamp: Utc::now(),
        };
        self.write_locked(&mut w, event.clone())?;
        Ok(event)
    }

    fn write_locked(&self, w: &mut Writer, event: RunEvent) -> Result<u64, StoreError> {
        if event.run_id != self.manifest.run_id {
            return Err(StoreError::RunMismatch {
                expected: self.manifest.run_id.clone(),
                got: event.run_id,
            });
        }
        if let Some(last) = w.last_seq {
            if event.seq <= last {
                return Err(StoreError::SequenceRegression { last, got: event.seq });
            }
        }
        let path = self.dir.join(EVENTS_FILE);
        let line = encode_line(&event);
        w.file.write_all(line.as_bytes()).map_err(io_err(&path))?;
        w.file.flush().map_err(io_err(&path))?;
        if self.durability == Durability::Sync {
            w.file.sync_data().map_err(io_err(&path))?;
        }
        w.last_seq = Some(event.seq);
        if let Some(item) = event.work_item().filter(|_| !event.is_failure()) {
            w.completed.insert((item.model, item.prompt_id, item.step), event.clone());
        }
        Ok(event.seq)
    }

    /// The event that completed `item`, if any.
    pub fn completed(&self, item: &WorkItem) -> Option<RunEvent> {
        let w = self.writer.lock().expect("run store poisoned");
        w.completed
            .get(&(item.model.clone(), item.prompt_id.clone(), item.step))
            .cloned()
    }

    pub fn events(&self) -> Result<Vec<RunEvent>, StoreError> {
        Ok(load_events(&self.dir)?.events)
    }

    /// Work in `plan` that has no completing event yet, in plan order.
    pub fn pending_work(&self, plan: &RunPlan) -> Vec<WorkItem> {
        let w = self.writer.lock().expect("run store poisoned");
        plan.items()
            .into_iter()
            .filter(|i| !w.completed.contains_key(&(i.model.clone(), i.prompt_id.clone(), i.step)))
            .collect()
    }

    pub fn cost_summary(&self, prices: &PriceTable) -> Result<CostLedger, StoreError> {
        Ok(cost_summary(&self.events()?, prices))
    }
}

/// Usage totals over an event log. Judgment events count toward the oracle.
pub fn cost_summary(events: &[RunEvent], prices: &PriceTable) -> CostLedger {
    let mut ledger = CostLedger::default();
    for ev in events {
        match ev.kind {
            EventKind::Failure => {}
            EventKind::Judgment => {
                let oracle = ev.oracle.as_deref().unwrap_or("oracle");
                ledger.record(oracle, true, &ev.usage);
            }
            _ => ledger.record(&ev.model, false, &ev.usage),
        }
    }
    ledger.apply_prices(prices);
    ledger
}

#[cfg(test)]
mod tests {
    use super::*;

    fn usage(p: u64, c: u64) -> TokenUsage {
        TokenUsage {
            prompt_tokens: p,
            completion_tokens: c,
            approximate: false,
        }
    }

    fn store(dir: &Path) -> RunStore {
        RunStore::create(dir, "run-1", serde_json::json!({"k": 1}))
            .unwrap()
            .with_durability(Durability::Flush)
    }

    fn zero(model: &str, prompt: &str, text: &str) -> EventDraft {
        EventDraft::new(EventKind::ZeroShot, model, prompt, text.into(), usage(3, 4))
    }

    #[test]
    fn append_then_reload() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let ev = s.append(zero("m", "q1", "line one\nline \"two\"")).unwrap();
        drop(s);
        let s = RunStore::open(dir.path()).unwrap();
        assert_eq!(s.events().unwrap(), vec![ev]);
        assert_eq!(s.run_id(), "run-1");
        assert_eq!(s.manifest().config["k"], 1);
    }

    #[test]
    fn sequence_regression_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let mut ev = s.append(zero("m", "q1", "a")).unwrap();
        ev.seq = 0;
        assert!(matches!(s.append_event(ev.clone()), Err(StoreError::SequenceRegression { last: 0, got: 0 })));
        ev.seq = 5;
        assert_eq!(s.append_event(ev.clone()).unwrap(), 5);
        ev.run_id = "other".into();
        ev.seq = 6;
        assert!(matches!(s.append_event(ev), Err(StoreError::RunMismatch { .. })));
    }

    #[test]
    fn ledger_conserves_usage_over_many_appends() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let (mut p, mut c) = (0, 0);
        for i in 0..10_000u64 {
            let mut d = zero(if i % 2 == 0 { "a" } else { "b" }, &format!("q{i}"), "x");
            d.usage = usage(i % 7, i % 13);
            p += i % 7;
            c += i % 13;
            s.append(d).unwrap();
        }
        let l = s.cost_summary(&PriceTable::new()).unwrap();
        let t = l.total();
        assert_eq!((t.prompt_tokens, t.completion_tokens, t.call_count), (p, c, 10_000));
        assert_eq!(l.models["a"].call_count, 5_000);
    }

    #[test]
    fn hand_summed_cost() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        s.append(zero("m", "q1", "a")).unwrap();
        let mut d = zero("m", "q1", "c");
        d.kind = EventKind::Critique;
        d.round = Some(1);
        d.usage = usage(10, 20);
        s.append(d).unwrap();
        let mut j = zero("m", "q1", "7 8");
        j.kind = EventKind::Judgment;
        j.variant = Some(Variant::ZeroShot);
        j.ordering = Some(Order::ModelFirst);
        j.oracle = Some("gpt-4".into());
        j.usage = usage(100, 5);
        s.append(j).unwrap();
        let mut prices = PriceTable::new();
        prices.insert("m".into(), Price { prompt_per_1k: 1.0, completion_per_1k: 2.0 });
        prices.insert("gpt-4".into(), Price { prompt_per_1k: 10.0, completion_per_1k: 20.0 });
        let l = s.cost_summary(&prices).unwrap();
        assert_eq!(l.models["m"], UsageTotals { prompt_tokens: 13, completion_tokens: 24, call_count: 2 });
        assert_eq!(l.oracle["gpt-4"], UsageTotals { prompt_tokens: 100, completion_tokens: 5, call_count: 1 });
        let expected = 0.013 * 1.0 + 0.024 * 2.0 + 0.1 * 10.0 + 0.005 * 20.0;
        assert!((l.estimated_cost - expected).abs() < 1e-12);
        let empty = cost_summary(&[], &prices);
        assert_eq!(empty, CostLedger::default());
    }

    #[test]
    fn truncated_tail_is_dropped_and_cut() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        s.append(zero("m", "q1", "a")).unwrap();
        s.append(zero("m", "q2", "b")).unwrap();
        drop(s);
        let path = dir.path().join(EVENTS_FILE);
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 10]).unwrap();
        let loaded = load_events(dir.path()).unwrap();
        assert!(loaded.dropped_tail);
        assert_eq!(loaded.events.len(), 1);
        let s = RunStore::open(dir.path()).unwrap().with_durability(Durability::Flush);
        let ev = s.append(zero("m", "q2", "b")).unwrap();
        assert_eq!(ev.seq, 1);
        let reloaded = load_events(dir.path()).unwrap();
        assert!(!reloaded.dropped_tail);
        assert_eq!(reloaded.events.len(), 2);
    }

    #[test]
    fn damage_before_the_tail_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        s.append(zero("m", "q1", "aaaa")).unwrap();
        s.append(zero("m", "q2", "b")).unwrap();
        drop(s);
        let path = dir.path().join(EVENTS_FILE);
        let text = std::fs::read_to_string(&path).unwrap().replacen("aaaa", "aaab", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_events(dir.path()), Err(StoreError::CorruptLog { line: 1, .. })));
    }

    #[test]
    fn create_refuses_existing_run() {
        let dir = tempfile::tempdir().unwrap();
        store(dir.path());
        assert!(matches!(
            RunStore::create(dir.path(), "x", serde_json::Value::Null),
            Err(StoreError::AlreadyExists(_))
        ));
        assert_eq!(RunStore::open_or_create(dir.path(), "x", serde_json::Value::Null).unwrap().run_id(), "run-1");
    }

    #[test]
    fn failures_do_not_complete_work() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(dir.path());
        let item = WorkItem {
            model: "m".into(),
            prompt_id: "q1".into(),
            step: Step::Critique { round: 1 },
        };
        s.append(EventDraft::failure(&item, "boom".into())).unwrap();
        assert!(s.completed(&item).is_none());
        s.append(EventDraft::for_step(&item, "crit".into(), usage(1, 1))).unwrap();
        assert_eq!(s.completed(&item).unwrap().content, "crit");
    }
}
