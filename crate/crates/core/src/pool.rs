//! Per-task shared message pool.
//!
//! Agents publish typed entries to an append-only log and read back through
//! projections (`view_*`). Nothing is ever edited or removed, so the log alone
//! is enough to reconstruct what each agent saw.

use std::io::Write;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{CheckerFeedback, ReflectionReport, SolverStep, SolverTrace};
use crate::backend::AgentRole;
pub use crate::clock::{Clock, FixedClock, StepClock, SystemClock};
use crate::table::{Table, TableState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Author {
    System,
    Agent(AgentRole),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    TableSnapshot,
    SolverStep,
    CheckerFeedback,
    Reflection,
    BudgetUpdate,
    FinalAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub answer: String,
    pub accepted_by_checker: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    TableSnapshot { round: u32, table: Table },
    SolverStep { round: u32, step: SolverStep },
    CheckerFeedback { round: u32, feedback: CheckerFeedback },
    Reflection { round: u32, report: ReflectionReport },
    BudgetUpdate { budget: Budget },
    FinalAnswer(FinalAnswer),
}

impl Payload {
    pub fn kind(&self) -> EntryKind {
        match self {
            Payload::TableSnapshot { .. } => EntryKind::TableSnapshot,
            Payload::SolverStep { .. } => EntryKind::SolverStep,
            Payload::CheckerFeedback { .. } => EntryKind::CheckerFeedback,
            Payload::Reflection { .. } => EntryKind::Reflection,
            Payload::BudgetUpdate { .. } => EntryKind::BudgetUpdate,
            Payload::FinalAnswer(_) => EntryKind::FinalAnswer,
        }
    }

    /// Who is allowed to publish this kind of entry.
    fn expected_author(&self) -> Author {
        match self {
            Payload::SolverStep { .. } => Author::Agent(AgentRole::Solver),
            Payload::CheckerFeedback { .. } => Author::Agent(AgentRole::Checker),
            Payload::Reflection { .. } => Author::Agent(AgentRole::Reflector),
            Payload::TableSnapshot { .. } | Payload::BudgetUpdate { .. } | Payload::FinalAnswer(_) => {
                Author::System
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub seq: u64,
    pub author: Author,
    pub kind: EntryKind,
    pub payload: Payload,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("entry kind {kind:?} does not match its payload ({payload:?})")]
    KindMismatch { kind: EntryKind, payload: EntryKind },
    #[error("{kind:?} entries must be written by {expected:?}, not {actual:?}")]
    WrongAuthor {
        kind: EntryKind,
        expected: Author,
        actual: Author,
    },
    #[error("the task already has a final answer")]
    DuplicateFinalAnswer,
    #[error("sequence numbers must increase (got {got} after {last})")]
    NonMonotonicSeq { last: u64, got: u64 },
    #[error("log line {line}: {message}")]
    Format { line: usize, message: String },
}

/// Step allowances for one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    /// Solver steps allowed within one round.
    pub max_inner_steps: u32,
    /// Rounds allowed; a new round starts after each rejected answer.
    pub max_outer_rounds: u32,
    /// Steps used in the current round.
    pub consumed_inner: u32,
    /// Rounds started so far.
    pub consumed_outer: u32,
}

impl Budget {
    pub fn new(max_inner_steps: u32, max_outer_rounds: u32) -> Result<Self, String> {
        if max_inner_steps == 0 || max_outer_rounds == 0 {
            return Err("budgets must be at least 1".into());
        }
        Ok(Budget {
            max_inner_steps,
            max_outer_rounds,
            consumed_inner: 0,
            consumed_outer: 0,
        })
    }

    pub fn inner_remaining(&self) -> u32 {
        self.max_inner_steps - self.consumed_inner
    }

    pub fn can_start_round(&self) -> bool {
        self.consumed_outer < self.max_outer_rounds
    }

    /// Opens a new round with a fresh step allowance.
    pub fn start_round(&mut self) -> u32 {
        assert!(self.can_start_round(), "outer budget exhausted");
        self.consumed_outer += 1;
        self.consumed_inner = 0;
        self.consumed_outer
    }

    pub fn consume_step(&mut self) {
        assert!(self.inner_remaining() > 0, "inner budget exhausted");
        self.consumed_inner += 1;
    }
}

impl Default for Budget {
    fn default() -> Self {
        Budget::new(5, 5).expect("default budget is valid")
    }
}

/// Everything known about one task while it is being solved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskContext {
    pub task_id: String,
    pub table_state: TableState,
    pub question: String,
    pub budget: Budget,
    entries: Vec<PoolEntry>,
}

impl TaskContext {
    pub fn new(task_id: impl Into<String>, table: Table, question: impl Into<String>, budget: Budget) -> Self {
        TaskContext {
            task_id: task_id.into(),
            table_state: TableState::new(table),
            question: question.into(),
            budget,
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    /// Appends an entry and returns its sequence number (starting at 1).
    pub fn append(
        &mut self,
        author: Author,
        payload: Payload,
        clock: &dyn Clock,
    ) -> Result<u64, SchemaError> {
        let kind = payload.kind();
        self.check(author, kind, &payload)?;
        let seq = self.entries.last().map_or(1, |e| e.seq + 1);
        self.entries.push(PoolEntry {
            seq,
            author,
            kind,
            payload,
            timestamp: clock.now(),
        });
        Ok(seq)
    }

    fn check(&self, author: Author, kind: EntryKind, payload: &Payload) -> Result<(), SchemaError> {
        if payload.kind() != kind {
            return Err(SchemaError::KindMismatch {
                kind,
                payload: payload.kind(),
            });
        }
        let expected = payload.expected_author();
        if author != expected {
            return Err(SchemaError::WrongAuthor {
                kind,
                expected,
                actual: author,
            });
        }
        if kind == EntryKind::FinalAnswer && self.final_answer().is_some() {
            return Err(SchemaError::DuplicateFinalAnswer);
        }
        Ok(())
    }

    /// Solver steps of the latest round that has any.
    pub fn view_trace(&self) -> SolverTrace {
        let mut trace: Option<SolverTrace> = None;
        for e in &self.entries {
            if let Payload::SolverStep { round, step } = &e.payload {
                match &mut trace {
                    Some(t) if t.round_index == *round => t.push(step.clone()),
                    _ => {
                        let mut t = SolverTrace::new(*round);
                        t.push(step.clone());
                        trace = Some(t);
                    }
                }
            }
        }
        trace.unwrap_or_else(|| SolverTrace::new(self.budget.consumed_outer.max(1)))
    }

    /// Solver steps of one round, in append order.
    pub fn view_round_trace(&self, round: u32) -> SolverTrace {
        let mut t = SolverTrace::new(round.max(1));
        for e in &self.entries {
            if let Payload::SolverStep { round: r, step } = &e.payload {
                if *r == round {
                    t.push(step.clone());
                }
            }
        }
        t
    }

    pub fn view_latest_reflection(&self) -> Option<&ReflectionReport> {
        self.entries.iter().rev().find_map(|e| match &e.payload {
            Payload::Reflection { report, .. } => Some(report),
            _ => None,
        })
    }

    pub fn view_latest_feedback(&self) -> Option<&CheckerFeedback> {
        self.entries.iter().rev().find_map(|e| match &e.payload {
            Payload::CheckerFeedback { feedback, .. } => Some(feedback),
            _ => None,
        })
    }

    pub fn view_all_feedback(&self) -> Vec<&CheckerFeedback> {
        self.entries
            .iter()
            .filter_map(|e| match &e.payload {
                Payload::CheckerFeedback { feedback, .. } => Some(feedback),
                _ => None,
            })
            .collect()
    }

    pub fn count(&self, kind: EntryKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    pub fn final_answer(&self) -> Option<&FinalAnswer> {
        self.entries.iter().find_map(|e| match &e.payload {
            Payload::FinalAnswer(f) => Some(f),
            _ => None,
        })
    }

    /// One JSON object per entry, one entry per line.
    pub fn export_log(&self, out: &mut dyn Write) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut *out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn log_string(&self) -> String {
        let mut buf = Vec::new();
        self.export_log(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("log is UTF-8")
    }
}

/// Reads a log written by [`TaskContext::export_log`], re-checking every
/// schema rule.
pub fn import_log(text: &str) -> Result<Vec<PoolEntry>, SchemaError> {
    let mut entries: Vec<PoolEntry> = Vec::new();
    let mut seen_final = false;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: PoolEntry = serde_json::from_str(line).map_err(|err| SchemaError::Format {
            line: i + 1,
            message: err.to_string(),
        })?;
        if e.kind != e.payload.kind() {
            return Err(SchemaError::KindMismatch {
                kind: e.kind,
                payload: e.payload.kind(),
            });
        }
        if e.author != e.payload.expected_author() {
            return Err(SchemaError::WrongAuthor {
                kind: e.kind,
                expected: e.payload.expected_author(),
                actual: e.author,
            });
        }
        if let Some(last) = entries.last() {
            if e.seq <= last.seq {
                return Err(SchemaError::NonMonotonicSeq {
                    last: last.seq,
                    got: e.seq,
                });
            }
        }
        if e.kind == EntryKind::FinalAnswer {
            if seen_final {
                return Err(SchemaError::DuplicateFinalAnswer);
            }
            seen_final = true;
        }
        entries.push(e);
    }
    Ok(entries)
}
