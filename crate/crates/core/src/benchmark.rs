//! Benchmark prompts and task categories.
//!
//! A benchmark file holds one JSON record per line with the fields `id`,
//! `category` and `text`. Blank lines are skipped.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The nine task domains of the Vicuna question set, with their prompt counts.
pub const VICUNA_CATEGORIES: [(&str, usize); 9] = [
    ("writing", 10),
    ("roleplay", 10),
    ("common-sense", 10),
    ("fermi", 10),
    ("counterfactual", 10),
    ("coding", 7),
    ("math", 3),
    ("generic", 10),
    ("knowledge", 10),
];

/// A normalized task-domain name.
///
/// Names compare case-insensitively; whitespace and underscores become `-`,
/// so `"Common Sense"`, `"common_sense"` and `"Common-sense"` are one category.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub struct Category(String);

impl Category {
    pub fn new(name: &str) -> Self {
        let mut out = String::with_capacity(name.len());
        let mut pending_sep = false;
        for ch in name.trim().chars() {
            if ch.is_whitespace() || ch == '_' || ch == '-' {
                pending_sep = !out.is_empty();
            } else {
                if pending_sep {
                    out.push('-');
                    pending_sep = false;
                }
                out.extend(ch.to_lowercase());
            }
        }
        Category(out)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<String> for Category {
    fn from(s: String) -> Self {
        Category::new(&s)
    }
}

impl From<&str> for Category {
    fn from(s: &str) -> Self {
        Category::new(s)
    }
}

impl From<Category> for String {
    fn from(c: Category) -> Self {
        c.0
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCategory {
    pub name: Category,
    pub prompt_count: usize,
}

/// One benchmark item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPrompt {
    pub id: String,
    pub category: Category,
    pub text: String,
    /// Position of this prompt within its category, starting at 0.
    pub index_in_category: usize,
}

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate prompt id {id:?} (line {line})")]
    DuplicateId { id: String, line: usize },
    #[error("reading benchmark: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchmarkRecord {
    id: String,
    category: String,
    text: String,
}

/// A loaded benchmark: prompts in file order plus the category table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Benchmark {
    prompts: Vec<TaskPrompt>,
    categories: Vec<TaskCategory>,
}

impl Benchmark {
    pub fn prompts(&self) -> &[TaskPrompt] {
        &self.prompts
    }

    /// Categories in order of first appearance.
    pub fn categories(&self) -> &[TaskCategory] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TaskPrompt> {
        self.prompts.iter().find(|p| p.id == id)
    }

    pub fn category_of(&self, id: &str) -> Option<&Category> {
        self.get(id).map(|p| &p.category)
    }

    pub fn category_counts(&self) -> BTreeMap<Category, usize> {
        self.categories
            .iter()
            .map(|c| (c.name.clone(), c.prompt_count))
            .collect()
    }

    /// Builds a benchmark from already-parsed prompts, recomputing category
    /// indices and counts.
    pub fn from_records<I>(records: I) -> Result<Self, BenchmarkError>
    where
        I: IntoIterator<Item = (String, String, String)>,
    {
        let mut bench = Benchmark::default();
        let mut seen = HashSet::new();
        for (n, (id, category, text)) in records.into_iter().enumerate() {
            bench.push(n + 1, id, &category, text, &mut seen)?;
        }
        Ok(bench)
    }

    /// Serializes back to the line-delimited record format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.prompts {
            let rec = serde_json::json!({
                "id": p.id,
                "category": p.category.as_str(),
                "text": p.text,
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }

    fn push(
        &mut self,
        line: usize,
        id: String,
        category: &str,
        text: String,
        seen: &mut HashSet<String>,
    ) -> Result<(), BenchmarkError> {
        if id.trim().is_empty() {
            return Err(BenchmarkError::Parse {
                line,
                message: "empty id".into(),
            });
        }
        if text.trim().is_empty() {
            return Err(BenchmarkError::Parse {
                line,
                message: "empty prompt text".into(),
            });
        }
        let category = Category::new(category);
        if category.as_str().is_empty() {
            return Err(BenchmarkError::Parse {
                line,
                message: "empty category".into(),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(BenchmarkError::DuplicateId { id, line });
        }
        let index_in_category = match self.categories.iter_mut().find(|c| c.name == category) {
            Some(c) => {
                c.prompt_count += 1;
                c.prompt_count - 1
            }
            None => {
                self.categories.push(TaskCategory {
                    name: category.clone(),
                    prompt_count: 1,
                });
                0
            }
        };
        self.prompts.push(TaskPrompt {
            id,
            category,
            text,
            index_in_category,
        });
        Ok(())
    }
}

/// Parses benchmark records from text. Line numbers in errors are 1-based.
pub fn parse_benchmark(input: &str) -> Result<Benchmark, BenchmarkError> {
    let mut bench = Benchmark::default();
    let mut seen = HashSet::new();
    for (n, raw) in input.lines().enumerate() {
        let line = n + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: BenchmarkRecord = serde_json::from_str(raw).map_err(|e| BenchmarkError::Parse {
            line,
            message: e.to_string(),
        })?;
        bench.push(line, rec.id, &rec.category, rec.text, &mut seen)?;
    }
    Ok(bench)
}

pub fn load_benchmark(path: &Path) -> Result<Benchmark, BenchmarkError> {
    let text = std::fs::read_to_string(path)?;
    parse_benchmark(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vicuna_shaped() -> String {
        let mut out = String::new();
        let mut n = 0;
        for (cat, count) in VICUNA_CATEGORIES {
            for j in 0..count {
                n += 1;
                out.push_str(
                    &serde_json::json!({"id": format!("q{n}"), "category": cat, "text": format!("{cat} task {j}")})
                        .to_string(),
                );
                out.push('\n');
            }
        }
        out
    }

    #[test]
    fn vicuna_shaped_file_has_nine_categories() {
        let b = parse_benchmark(&vicuna_shaped()).unwrap();
        assert_eq!(b.len(), 80);
        let counts: Vec<usize> = b.categories().iter().map(|c| c.prompt_count).collect();
        assert_eq!(counts, vec![10, 10, 10, 10, 10, 7, 3, 10, 10]);
        assert_eq!(b.get("q80").unwrap().index_in_category, 9);
        assert_eq!(b.get("q57").unwrap().category.as_str(), "coding");
    }

    #[test]
    fn empty_file() {
        let b = parse_benchmark("").unwrap();
        assert!(b.is_empty());
        assert!(b.categories().is_empty());
    }

    #[test]
    fn duplicate_id_rejected() {
        let input = r#"{"id":"q1","category":"math","text":"a"}
{"id":"q1","category":"math","text":"b"}"#;
        match parse_benchmark(input) {
            Err(BenchmarkError::DuplicateId { id, line }) => {
                assert_eq!(id, "q1");
                assert_eq!(line, 2);
            }
            other => panic!("expected duplicate id, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let input = "{\"id\":\"q1\",\"category\":\"math\",\"text\":\"a\"}\n\nnot json\n";
        match parse_benchmark(input) {
            Err(BenchmarkError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn category_names_normalize() {
        assert_eq!(Category::new("Common Sense"), Category::new("common-sense"));
        assert_eq!(Category::new(" Common_sense "), Category::new("COMMON-SENSE"));
        assert_eq!(Category::new("Writing").as_str(), "writing");
    }

    #[test]
    fn jsonl_round_trip() {
        let b = parse_benchmark(&vicuna_shaped()).unwrap();
        assert_eq!(parse_benchmark(&b.to_jsonl()).unwrap(), b);
    }
}
