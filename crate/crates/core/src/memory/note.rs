use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::backend::EmbeddingVector;

/// Error taxonomy for archived episodes, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    LogicalReasoning,
    CountingAggregation,
    FormatTemporal,
    IncompleteExtraction,
    CalculationComparison,
    Other,
    None,
}

impl ErrorType {
    /// Every error category (excludes `None`), in reporting order.
    pub const ERRORS: [ErrorType; 6] = [
        ErrorType::LogicalReasoning,
        ErrorType::CountingAggregation,
        ErrorType::FormatTemporal,
        ErrorType::IncompleteExtraction,
        ErrorType::CalculationComparison,
        ErrorType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorType::LogicalReasoning => "logical_reasoning",
            ErrorType::CountingAggregation => "counting_aggregation",
            ErrorType::FormatTemporal => "format_temporal",
            ErrorType::IncompleteExtraction => "incomplete_extraction",
            ErrorType::CalculationComparison => "calculation_comparison",
            ErrorType::Other => "other",
            ErrorType::None => "none",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ErrorType::LogicalReasoning => "Logical Reasoning Errors",
            ErrorType::CountingAggregation => "Counting & Aggregation Errors",
            ErrorType::FormatTemporal => "Format & Temporal Interpretation Errors",
            ErrorType::IncompleteExtraction => "Incomplete Information Extraction",
            ErrorType::CalculationComparison => "Calculation & Comparison Errors",
            ErrorType::Other => "Other Errors",
            ErrorType::None => "No Error",
        }
    }

    /// Lenient mapping from free-form model output. `None` when the text does
    /// not name any known category.
    pub fn recognize(text: &str) -> Option<ErrorType> {
        let norm: String = text
            .trim()
            .trim_matches(|c| c == '\'' || c == '"' || c == '`')
            .to_lowercase()
            .chars()
            .map(|c| if c.is_alphanumeric() { c } else { '_' })
            .collect();
        let norm = norm.trim_matches('_');
        if norm.is_empty() || norm == "none" || norm == "no_error" || norm == "n_a" {
            return Some(ErrorType::None);
        }
        let has = |w: &str| norm.contains(w);
        let t = if has("logic") {
            ErrorType::LogicalReasoning
        } else if has("count") || has("aggregat") {
            ErrorType::CountingAggregation
        } else if has("format") || has("temporal") {
            ErrorType::FormatTemporal
        } else if has("incomplete") || has("extraction") {
            ErrorType::IncompleteExtraction
        } else if has("calculat") || has("comparison") {
            ErrorType::CalculationComparison
        } else if norm == "other" || norm == "other_errors" {
            ErrorType::Other
        } else {
            return None;
        };
        Some(t)
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        std::iter::once(ErrorType::None)
            .chain(ErrorType::ERRORS)
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown error type `{s}`"))
    }
}

/// The distilled content of one solved episode, before it gets an id and an
/// embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteContent {
    pub question_id: String,
    pub question: String,
    pub question_type: String,
    pub required_operations: Vec<String>,
    pub context: String,
    pub keywords: Vec<String>,
    pub tags: Vec<String>,
    pub correct_answer: String,
    pub model_answer: String,
    pub correct_steps: Vec<String>,
    pub wrong_steps: Vec<String>,
    pub error_type: ErrorType,
    pub error_reason: String,
}

impl NoteContent {
    /// Text fed to the embedder: context, keywords and tags, space-joined.
    pub fn embedding_text(&self) -> String {
        let mut parts = vec![self.context.clone()];
        parts.extend(self.keywords.iter().cloned());
        parts.extend(self.tags.iter().cloned());
        parts.retain(|p| !p.trim().is_empty());
        parts.join(" ")
    }

    /// `error_type == none` exactly when the reason is empty or "none".
    pub fn error_fields_consistent(&self) -> bool {
        let reason_none = reason_is_none(&self.error_reason);
        (self.error_type == ErrorType::None) == reason_none
    }
}

pub(crate) fn reason_is_none(reason: &str) -> bool {
    let r = reason.trim();
    r.is_empty() || r.eq_ignore_ascii_case("none")
}

/// A stored long-term memory note.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryNote {
    pub id: String,
    #[serde(flatten)]
    pub content: NoteContent,
    /// Outgoing links to other notes; kept in the store's edge section on disk.
    #[serde(skip)]
    pub links: Vec<String>,
    pub embedding: EmbeddingVector,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}
