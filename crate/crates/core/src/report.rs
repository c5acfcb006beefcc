//! Report tables rendered as markdown (two decimals) or csv (full precision).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{equal_weight_mean, weighted_mean, WeightVector};
use crate::benchmark::Category;
use crate::perfics::PerficsResult;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row} has {got} cells, expected {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    Number(f64),
    /// A signed change, rendered with an explicit sign.
    Delta(f64),
    Text(String),
    Empty,
}

impl Cell {
    pub fn text(s: impl Into<String>) -> Self {
        Cell::Text(s.into())
    }

    fn markdown(&self) -> String {
        match self {
            Cell::Number(v) => format!("{v:.2}"),
            Cell::Delta(v) => format!("{v:+.2}"),
            Cell::Text(s) => s.replace('|', "\\|"),
            Cell::Empty => String::new(),
        }
    }

    fn csv(&self) -> String {
        match self {
            Cell::Number(v) => format!("{v}"),
            Cell::Delta(v) if v.is_sign_negative() => format!("{v}"),
            Cell::Delta(v) => format!("+{v}"),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    /// Inverse of the csv rendering. Numeric-looking text that would not
    /// re-render identically stays text.
    fn parse_csv(field: &str) -> Self {
        if field.is_empty() {
            return Cell::Empty;
        }
        if let Some(rest) = field.strip_prefix('+') {
            if let Ok(v) = rest.parse::<f64>() {
                if format!("+{v}") == field {
                    return Cell::Delta(v);
                }
            }
        }
        if let Ok(v) = field.parse::<f64>() {
            if format!("{v}") == field {
                return Cell::Number(v);
            }
        }
        Cell::Text(field.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Markdown,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "markdown" | "md" => Ok(Format::Markdown),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown format {other:?} (markdown, csv)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl ReportTable {
    pub fn new(title: impl Into<String>, columns: Vec<String>) -> Self {
        ReportTable {
            title: title.into(),
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        self.rows.push(row);
    }

    /// Loads csv as written by [`emit_table`]; the title is not part of csv.
    pub fn from_csv(title: &str, text: &str) -> Result<Self, ReportError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let columns: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            if rec.len() != columns.len() {
                return Err(ReportError::Ragged {
                    row: i + 1,
                    got: rec.len(),
                    expected: columns.len(),
                });
            }
            rows.push(rec.iter().map(Cell::parse_csv).collect());
        }
        Ok(ReportTable {
            title: title.to_string(),
            columns,
            rows,
        })
    }
}

pub fn emit_table(t: &ReportTable, format: Format) -> String {
    match format {
        Format::Markdown => emit_markdown(t),
        Format::Csv => emit_csv(t),
    }
}

fn emit_markdown(t: &ReportTable) -> String {
    let mut out = String::new();
    if !t.title.is_empty() {
        let _ = writeln!(out, "### {}\n", t.title);
    }
    let _ = writeln!(out, "| {} |", t.columns.join(" | "));
    let sep: Vec<&str> = t
        .columns
        .iter()
        .enumerate()
        .map(|(i, _)| if i == 0 { "---" } else { "---:" })
        .collect();
    let _ = writeln!(out, "| {} |", sep.join(" | "));
    for row in &t.rows {
        let cells: Vec<String> = row.iter().map(Cell::markdown).collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
    }
    out
}

fn emit_csv(t: &ReportTable) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(&t.columns).expect("in-memory write");
    for row in &t.rows {
        w.write_record(row.iter().map(Cell::csv)).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
}

/// One model's zero-shot and refined category means.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelColumns {
    pub model: String,
    pub zero_shot: Vec<(Category, f64)>,
    pub refined: Vec<(Category, f64)>,
}

fn lookup(rows: &[(Category, f64)], c: &Category) -> Cell {
    rows.iter().find(|(rc, _)| rc == c).map_or(Cell::Empty, |(_, v)| Cell::Number(*v))
}

fn mean_cell(value: Result<f64, impl std::fmt::Debug>) -> Cell {
    value.map_or(Cell::Empty, Cell::Number)
}

/// Categories down the side, a zero-shot/refined column pair per model, and
/// two summary rows: the equal-weight mean and the `weights` mean.
pub fn refinement_table(title: &str, models: &[ModelColumns], weights: &WeightVector, weights_label: &str) -> ReportTable {
    let mut columns = vec!["Category".to_string()];
    for m in models {
        columns.push(format!("{} Zero-shot", m.model));
        columns.push(format!("{} Refined", m.model));
    }
    let mut t = ReportTable::new(title, columns);
    let mut categories: Vec<Category> = Vec::new();
    for m in models {
        for (c, _) in m.zero_shot.iter().chain(&m.refined) {
            if !categories.contains(c) {
                categories.push(c.clone());
            }
        }
    }
    for c in &categories {
        let mut row = vec![Cell::text(c.as_str())];
        for m in models {
            row.push(lookup(&m.zero_shot, c));
            row.push(lookup(&m.refined, c));
        }
        t.push(row);
    }
    if categories.is_empty() {
        return t;
    }
    let mut eq = vec![Cell::text("Mean (Eq Weight)")];
    let mut weighted = vec![Cell::text(format!("Mean ({weights_label})"))];
    for m in models {
        for rows in [&m.zero_shot, &m.refined] {
            eq.push(mean_cell(equal_weight_mean(rows)));
            weighted.push(mean_cell(weighted_mean(rows, weights)));
        }
    }
    t.push(eq);
    t.push(weighted);
    t
}

/// Label, zero-shot, refined and change columns, for a single model and ordering.
pub fn change_table(title: &str, rows: &[(String, f64, f64)]) -> ReportTable {
    let mut t = ReportTable::new(
        title,
        ["Category", "Zero-shot", "Refined", "Change"].map(String::from).to_vec(),
    );
    for (label, zero, refined) in rows {
        t.push(vec![
            Cell::text(label.clone()),
            Cell::Number(*zero),
            Cell::Number(*refined),
            Cell::Delta(refined - zero),
        ]);
    }
    t
}

pub fn ranking_table(title: &str, results: &[PerficsResult]) -> ReportTable {
    let mut t = ReportTable::new(
        title,
        ["Rank", "Model", "VRAM (GB)", "log PeRFICS", "PeRFICS"].map(String::from).to_vec(),
    );
    for r in results {
        t.push(vec![
            Cell::text(r.rank.to_string()),
            Cell::text(r.model.clone()),
            Cell::Number(r.cost),
            Cell::Number(r.log_score),
            r.score.map_or(Cell::text("overflow"), |s| Cell::text(format!("{s:.4e}"))),
        ]);
    }
    t
}
