//! Dataset readers. Everything is converted to [`TaskRecord`]s.
//!
//! - `normalized_jsonl`: one JSON object per line with `id`, `table`
//!   (`columns`, `rows`), `question`, `answers`, `task_kind`.
//! - `wikitq_tsv`: WikiTableQuestions question files (`id`, `utterance`,
//!   `context`, `targetValue`), tables in external CSV files.
//! - `tabfact_json`: TabFact statement files keyed by table file name, tables
//!   in `#`-delimited CSV files.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Task;
use crate::table::Table;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Qa,
    FactVerification,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub table: Table,
    pub question: String,
    pub answers: Vec<String>,
    pub task_kind: TaskKind,
}

impl TaskRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.question.trim().is_empty() {
            return Err("empty question".into());
        }
        if self.answers.is_empty() {
            return Err("no gold answers".into());
        }
        if self.task_kind == TaskKind::FactVerification {
            if let Some(a) = self
                .answers
                .iter()
                .find(|a| crate::eval::metrics::normalize_label(a).is_none())
            {
                return Err(format!("verification label `{a}` is not yes/no"));
            }
        }
        Ok(())
    }

    /// The engine's view: gold values joined with `|`.
    pub fn to_task(&self) -> Task {
        Task {
            id: self.id.clone(),
            table: self.table.clone(),
            question: self.question.clone(),
            ground_truth: Some(self.answers.join("|")),
        }
    }

    pub fn is_correct(&self, predicted: &str) -> bool {
        match self.task_kind {
            TaskKind::Qa => crate::eval::metrics::denotation_match(predicted, &self.answers),
            TaskKind::FactVerification => crate::eval::metrics::exact_match(predicted, &self.answers[0]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    NormalizedJsonl,
    WikitqTsv,
    TabfactJson,
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normalized_jsonl" => Ok(Self::NormalizedJsonl),
            "wikitq_tsv" => Ok(Self::WikitqTsv),
            "tabfact_json" => Ok(Self::TabfactJson),
            _ => Err(format!(
                "unknown dataset format `{s}` (expected normalized_jsonl, wikitq_tsv or tabfact_json)"
            )),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NormalizedJsonl => "normalized_jsonl",
            Self::WikitqTsv => "wikitq_tsv",
            Self::TabfactJson => "tabfact_json",
        })
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{location}: {message}")]
    Format { location: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(location: impl Into<String>, message: impl fmt::Display) -> IngestError {
    IngestError::Format {
        location: location.into(),
        message: message.to_string(),
    }
}

fn clean_cell(s: &str) -> String {
    s.replace("\r\n", " ").replace(['\n', '\r'], " ").trim().to_string()
}

fn build_table(columns: Vec<String>, rows: Vec<Vec<String>>) -> Result<Table, String> {
    let columns = columns.iter().map(|c| clean_cell(c)).collect();
    let rows = rows
        .iter()
        .map(|r| r.iter().map(|c| clean_cell(c)).collect())
        .collect();
    Table::new(columns, rows).map_err(|e| e.to_string())
}

pub fn ingest(path: &Path, format: DatasetFormat) -> Result<Vec<TaskRecord>, IngestError> {
    let records = match format {
        DatasetFormat::NormalizedJsonl => read_normalized(path)?,
        DatasetFormat::WikitqTsv => read_wikitq(path)?,
        DatasetFormat::TabfactJson => read_tabfact(path)?,
    };
    let mut seen = std::collections::HashSet::new();
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(format_err(path.display().to_string(), format!("duplicate task id `{}`", r.id)));
        }
    }
    Ok(records)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTable {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    table: RawTable,
    question: String,
    answers: Vec<String>,
    task_kind: TaskKind,
}

pub fn parse_normalized(text: &str, source: &str) -> Result<Vec<TaskRecord>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("{source} line {}", i + 1);
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| format_err(&loc, e))?;
        let table = build_table(raw.table.columns, raw.table.rows).map_err(|e| format_err(&loc, e))?;
        let record = TaskRecord {
            id: raw.id,
            table,
            question: raw.question,
            answers: raw.answers,
            task_kind: raw.task_kind,
        };
        record.validate().map_err(|e| format_err(&loc, e))?;
        out.push(record);
    }
    Ok(out)
}

pub fn to_normalized_jsonl(records: &[TaskRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("task records serialize"));
        out.push('\n');
    }
    out
}

fn read_normalized(path: &Path) -> Result<Vec<TaskRecord>, IngestError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_normalized(&text, &path.display().to_string())
}

/// WikiTQ's TSV escapes: `\n` newline, `\p` pipe, `\\` backslash.
fn unescape_wikitq(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('p') => out.push('|'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

/// Finds `rel` next to the question file or one directory up.
fn resolve_near(base: &Path, rel: &str) -> Option<PathBuf> {
    let dir = base.parent().unwrap_or(Path::new("."));
    let mut candidates = vec![dir.join(rel)];
    if let Some(up) = dir.parent() {
        candidates.push(up.join(rel));
    }
    candidates.into_iter().find(|p| p.is_file())
}

fn read_csv_table(path: &Path, delimiter: u8) -> Result<Table, IngestError> {
    let loc = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_path(path)
        .map_err(|e| format_err(&loc, e))?;
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| format_err(&loc, e))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| format_err(&loc, e))?;
        rows.push(rec.iter().map(String::from).collect());
    }
    build_table(columns, rows).map_err(|e| format_err(&loc, e))
}

fn read_wikitq(path: &Path) -> Result<Vec<TaskRecord>, IngestError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let source = path.display().to_string();
    let Some((_, header)) = lines.next() else {
        return Ok(Vec::new());
    };
    let cols: Vec<&str> = header.split('\t').collect();
    let find = |name: &str| {
        cols.iter()
            .position(|c| c.trim() == name)
            .ok_or_else(|| format_err(format!("{source} line 1"), format!("missing column `{name}`")))
    };
    let (id_i, q_i, ctx_i, ans_i) = (find("id")?, find("utterance")?, find("context")?, find("targetValue")?);

    let mut out = Vec::new();
    for (i, line) in lines {
        let loc = format!("{source} line {}", i + 1);
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != cols.len() {
            return Err(format_err(&loc, format!("expected {} fields, found {}", cols.len(), fields.len())));
        }
        let table_path = resolve_near(path, fields[ctx_i].trim())
            .ok_or_else(|| format_err(&loc, format!("table file `{}` not found", fields[ctx_i])))?;
        let table = read_csv_table(&table_path, b',')?;
        // split before unescaping so `\p` stays a literal pipe inside a value
        let answers: Vec<String> = fields[ans_i]
            .split('|')
            .map(|a| clean_cell(&unescape_wikitq(a)))
            .collect();
        let record = TaskRecord {
            id: fields[id_i].trim().to_string(),
            table,
            question: clean_cell(&unescape_wikitq(fields[q_i])),
            answers,
            task_kind: TaskKind::Qa,
        };
        record.validate().map_err(|e| format_err(&loc, e))?;
        out.push(record);
    }
    Ok(out)
}

fn read_tabfact(path: &Path) -> Result<Vec<TaskRecord>, IngestError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let source = path.display().to_string();
    // serde_json's default map is ordered by key, which fixes the task order.
    let doc: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| format_err(&source, e))?;
    let mut out = Vec::new();
    for (table_file, entry) in doc {
        let loc = format!("{source} entry `{table_file}`");
        let parts = entry
            .as_array()
            .filter(|a| a.len() >= 2)
            .ok_or_else(|| format_err(&loc, "expected [statements, labels, ...]"))?;
        let statements: Vec<String> =
            serde_json::from_value(parts[0].clone()).map_err(|e| format_err(&loc, e))?;
        let labels: Vec<i64> = serde_json::from_value(parts[1].clone()).map_err(|e| format_err(&loc, e))?;
        if statements.len() != labels.len() {
            return Err(format_err(&loc, "statement and label counts differ"));
        }
        let table_path = ["all_csv", "data/all_csv", ""]
            .iter()
            .find_map(|sub| {
                let rel = if sub.is_empty() {
                    table_file.clone()
                } else {
                    format!("{sub}/{table_file}")
                };
                resolve_near(path, &rel)
            })
            .ok_or_else(|| format_err(&loc, format!("table file `{table_file}` not found")))?;
        let table = read_csv_table(&table_path, b'#')?;
        for (i, (statement, label)) in statements.into_iter().zip(labels).enumerate() {
            let answer = match label {
                1 => "yes",
                0 => "no",
                other => return Err(format_err(&loc, format!("label {other} is not 0 or 1"))),
            };
            out.push(TaskRecord {
                id: format!("{table_file}#{i}"),
                table: table.clone(),
                question: clean_cell(&statement),
                answers: vec![answer.to_string()],
                task_kind: TaskKind::FactVerification,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = r#"{"id":"a","table":{"columns":["x"],"rows":[["1"]]},"question":"q1","answers":["1"],"task_kind":"qa"}
{"id":"b","table":{"columns":["x","y"],"rows":[["1","line\nbreak"]]},"question":"q2","answers":["yes"],"task_kind":"fact_verification"}
"#;

    #[test]
    fn two_line_file() {
        let recs = parse_normalized(TWO, "mem").unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].table.rows()[0][1], "line break");
        assert_eq!(parse_normalized(&to_normalized_jsonl(&recs), "again").unwrap(), recs);
    }

    #[test]
    fn missing_question_reports_line() {
        let bad = r#"{"id":"a","table":{"columns":["x"],"rows":[]},"answers":["1"],"task_kind":"qa"}"#;
        let err = parse_normalized(bad, "f").unwrap_err();
        assert!(err.to_string().starts_with("f line 1:"), "{err}");
        assert!(err.to_string().contains("question"));
    }

    #[test]
    fn invalid_records() {
        let no_answers = r#"{"id":"a","table":{"columns":["x"],"rows":[]},"question":"q","answers":[],"task_kind":"qa"}"#;
        assert!(parse_normalized(no_answers, "f").is_err());
        let bad_label = r#"{"id":"a","table":{"columns":["x"],"rows":[]},"question":"q","answers":["entailed"],"task_kind":"fact_verification"}"#;
        assert!(parse_normalized(bad_label, "f").is_err());
        let ragged = r#"{"id":"a","table":{"columns":["x"],"rows":[["1","2"]]},"question":"q","answers":["1"],"task_kind":"qa"}"#;
        assert!(parse_normalized(ragged, "f").is_err());
    }

    #[test]
    fn wikitq_escapes() {
        assert_eq!(unescape_wikitq(r"a\nb\pc\\d"), "a\nb|c\\d");
    }

    #[test]
    fn tabfact_layout() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        std::fs::create_dir_all(data.join("all_csv")).unwrap();
        std::fs::write(
            data.join("all_csv/t1.html.csv"),
            "player#goals\nlandon donovan#57\nclint dempsey#36\n",
        )
        .unwrap();
        let json = data.join("statements.json");
        std::fs::write(
            &json,
            r#"{"t1.html.csv": [["landon donovan scored 57 goals", "clint dempsey scored 40 goals"], [1, 0], "us goalscorers"]}"#,
        )
        .unwrap();
        let recs = ingest(&json, DatasetFormat::TabfactJson).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].id, "t1.html.csv#0");
        assert_eq!(recs[0].answers, vec!["yes"]);
        assert_eq!(recs[1].answers, vec!["no"]);
        assert_eq!(recs[1].table.columns(), ["player", "goals"]);
    }
}
