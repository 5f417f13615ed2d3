//! Tables and the markdown wire form used in every agent prompt.
//!
//! The canonical dialect is fixed so that identical tables always render to
//! byte-identical text:
//!
//! ```text
//! | a | b |
//! | --- | --- |
//! | 1 | x\|y |
//! ```
//!
//! One space of padding inside each pipe, a `---` separator per column, no
//! alignment markers, and `|` inside a cell escaped as `\|`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sentinel a solver emits when it did not touch the table.
pub const NOT_CHANGED: &str = "<NOT CHANGED>";
const NOT_CHANGED_ALT: &str = "<NOT_CHANGED>";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("missing header row")]
    MissingHeader,
    #[error("malformed separator row: {0}")]
    MalformedSeparator(String),
    #[error("ragged row {row}: expected {expected} cells, found {actual}")]
    RaggedRow {
        row: usize,
        expected: usize,
        actual: usize,
    },
    #[error("column {0} has an empty name")]
    EmptyColumnName(usize),
    #[error("cell at row {row}, column {column} contains a line break")]
    LineBreakInCell { row: usize, column: usize },
}

/// A rectangular table of string cells.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawTable", into = "RawTable")]
pub struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct RawTable {
    columns: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl TryFrom<RawTable> for Table {
    type Error = TableError;

    fn try_from(raw: RawTable) -> Result<Self, Self::Error> {
        Table::new(raw.columns, raw.rows)
    }
}

impl From<Table> for RawTable {
    fn from(t: Table) -> Self {
        RawTable {
            columns: t.columns,
            rows: t.rows,
        }
    }
}

impl Table {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self, TableError> {
        for (i, c) in columns.iter().enumerate() {
            if c.trim().is_empty() {
                return Err(TableError::EmptyColumnName(i));
            }
            if has_line_break(c) {
                return Err(TableError::LineBreakInCell { row: 0, column: i });
            }
        }
        for (r, row) in rows.iter().enumerate() {
            if row.len() != columns.len() {
                return Err(TableError::RaggedRow {
                    row: r + 1,
                    expected: columns.len(),
                    actual: row.len(),
                });
            }
            if let Some(c) = row.iter().position(|cell| has_line_break(cell)) {
                return Err(TableError::LineBreakInCell { row: r + 1, column: c });
            }
        }
        Ok(Table { columns, rows })
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    /// Total number of body cells.
    pub fn cell_count(&self) -> usize {
        self.rows.len() * self.columns.len()
    }

    /// Parses a pipe-delimited markdown table.
    ///
    /// Blank lines are skipped. Leading and trailing pipes are optional.
    pub fn parse_markdown(text: &str) -> Result<Table, TableError> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines.next().ok_or(TableError::MissingHeader)?;
        let columns = split_row(header);
        let sep = lines
            .next()
            .ok_or_else(|| TableError::MalformedSeparator("missing".into()))?;
        let sep_cells = split_row(sep);
        if sep_cells.len() != columns.len() || !sep_cells.iter().all(|c| is_separator_cell(c)) {
            return Err(TableError::MalformedSeparator(sep.to_string()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let cells = split_row(line);
            if cells.len() != columns.len() {
                return Err(TableError::RaggedRow {
                    row: i + 1,
                    expected: columns.len(),
                    actual: cells.len(),
                });
            }
            rows.push(cells);
        }
        Table::new(columns, rows)
    }

    /// Renders the canonical markdown form.
    pub fn to_markdown(&self) -> String {
        let mut out = render_row(&self.columns);
        out.push('\n');
        out.push_str(&render_row(
            &self.columns.iter().map(|_| "---".to_string()).collect::<Vec<_>>(),
        ));
        for row in &self.rows {
            out.push('\n');
            out.push_str(&render_row(row));
        }
        out
    }

    /// The header line alone, used as part of retrieval queries.
    pub fn header_markdown(&self) -> String {
        render_row(&self.columns)
    }
}

impl std::fmt::Display for Table {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_markdown())
    }
}

fn has_line_break(s: &str) -> bool {
    s.contains('\n') || s.contains('\r')
}

fn is_separator_cell(cell: &str) -> bool {
    let body = cell.strip_prefix(':').unwrap_or(cell);
    let body = body.strip_suffix(':').unwrap_or(body);
    !body.is_empty() && body.chars().all(|c| c == '-')
}

fn render_row(cells: &[String]) -> String {
    let mut out = String::from("|");
    for cell in cells {
        out.push(' ');
        out.push_str(&cell.replace('|', "\\|"));
        out.push_str(" |");
    }
    out
}

/// Splits a row on unescaped pipes, trimming and unescaping each cell.
fn split_row(line: &str) -> Vec<String> {
    let mut cells = Vec::new();
    let mut current = String::new();
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\\' if chars.peek() == Some(&'|') => {
                chars.next();
                current.push('|');
            }
            '|' => cells.push(std::mem::take(&mut current)),
            _ => current.push(c),
        }
    }
    cells.push(current);

    // Outer pipes produce empty first/last fragments.
    if line.starts_with('|') {
        cells.remove(0);
    }
    if line.ends_with('|') && !line.ends_with("\\|") && !cells.is_empty() {
        cells.pop();
    }
    cells.into_iter().map(|c| c.trim().to_string()).collect()
}

/// True when `block` is the "table not changed" sentinel (either spelling).
pub fn is_not_changed(block: &str) -> bool {
    let t = block.trim();
    t == NOT_CHANGED || t == NOT_CHANGED_ALT
}

/// The environment a solver operates on: the original table and whatever
/// intermediate table the solver has produced since.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableState {
    original: Table,
    current: Table,
    changed: bool,
}

impl TableState {
    pub fn new(original: Table) -> Self {
        TableState {
            current: original.clone(),
            original,
            changed: false,
        }
    }

    pub fn original(&self) -> &Table {
        &self.original
    }

    pub fn current(&self) -> &Table {
        &self.current
    }

    pub fn changed(&self) -> bool {
        self.changed
    }

    /// Applies a solver's intermediate-table block.
    pub fn apply_intermediate(&self, block: &str) -> Result<TableState, TableError> {
        if is_not_changed(block) {
            return Ok(self.clone());
        }
        let current = Table::parse_markdown(block)?;
        let changed = current != self.original;
        Ok(TableState {
            original: self.original.clone(),
            current,
            changed,
        })
    }

    /// Back to the original table.
    pub fn reset(&self) -> TableState {
        TableState::new(self.original.clone())
    }
}
