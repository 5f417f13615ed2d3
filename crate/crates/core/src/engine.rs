//! Per-task control loop and the batch driver.
//!
//! Each outer round starts from the original table with one solver-time
//! retrieval, then runs solver steps until a concrete answer appears or the
//! round's step budget runs out. A concrete answer goes to the checker; a full
//! score ends the task, anything less brings in the reflector and opens the
//! next round.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentError, AgentSuite, SolverAnswer, SolverInput, SummaryInput};
use crate::backend::{AgentRole, BackendError, ChatBackend, ChatRequest, Embedder, EmbeddingVector};
use crate::clock::Clock;
use crate::memory::{ErrorType, IntegrationOutcome, MemoryStore, StoreError};
use crate::pool::{Author, Budget, FinalAnswer, Payload, TaskContext};
use crate::table::Table;

pub const UNANSWERED: &str = "UNANSWERED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Labels required; completed tasks are archived into the store.
    MemoryBuilding,
    /// The store is only read.
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    CheckerAccepted,
    BudgetExhausted,
    BackendFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total tries per call, including the first.
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            max_attempts: 1,
            initial_backoff_ms: 0,
        }
    }

    fn run<T>(&self, mut f: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut delay = self.initial_backoff_ms;
        let mut attempt = 1;
        loop {
            match f() {
                Err(e) if e.is_retryable() && attempt < self.max_attempts => {
                    tracing::warn!("attempt {attempt} failed, retrying: {e}");
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                    delay = delay.saturating_mul(2);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

struct RetryingChat<'a> {
    inner: &'a dyn ChatBackend,
    policy: RetryPolicy,
}

impl ChatBackend for RetryingChat<'_> {
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.policy.run(|| self.inner.chat(request))
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }
}

struct RetryingEmbedder<'a> {
    inner: &'a dyn Embedder,
    policy: RetryPolicy,
}

impl Embedder for RetryingEmbedder<'_> {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        self.policy.run(|| self.inner.embed(text))
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub max_inner_steps: u32,
    pub max_outer_rounds: u32,
    pub mode: RunMode,
    pub retry: RetryPolicy,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            max_inner_steps: 5,
            max_outer_rounds: 5,
            mode: RunMode::Inference,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("task `{0}` has no ground truth, which memory building requires")]
    MissingGroundTruth(String),
}

/// One unit of work for the engine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub table: Table,
    pub question: String,
    pub ground_truth: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveRecord {
    pub note_id: String,
    pub error_type: ErrorType,
    /// Whether the evolution step was reached and its decision said to evolve.
    pub should_evolve: Option<bool>,
    pub outcome: IntegrationOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub task_id: String,
    pub model_answer: String,
    pub ground_truth: Option<String>,
    pub outer_rounds_used: u32,
    /// Solver steps across all rounds.
    pub inner_steps_used: u32,
    pub accepted_by_checker: bool,
    pub terminal_reason: TerminalReason,
    pub checker_totals: Vec<u8>,
    pub reflections: u32,
    pub parse_failures: u32,
    pub table_rows: usize,
    pub table_columns: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub archive: Option<ArchiveRecord>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

/// A finished task: its record plus the full working-memory log.
#[derive(Debug, Clone)]
pub struct TaskRun {
    pub record: AnswerRecord,
    pub context: TaskContext,
}

pub struct Engine<'a> {
    pub agents: &'a AgentSuite,
    pub backend: &'a dyn ChatBackend,
    pub embedder: &'a dyn Embedder,
    pub clock: &'a dyn Clock,
    pub config: EngineConfig,
}

enum Step<T> {
    Done(T),
    ParseFailure(AgentError),
    Fatal(String),
}

fn classify<T>(r: Result<T, AgentError>) -> Step<T> {
    match r {
        Ok(v) => Step::Done(v),
        Err(e) if e.is_parse() => Step::ParseFailure(e),
        Err(e) => Step::Fatal(e.to_string()),
    }
}

impl Engine<'_> {
    fn budget(&self) -> Result<Budget, EngineError> {
        Budget::new(self.config.max_inner_steps, self.config.max_outer_rounds).map_err(EngineError::Config)
    }

    pub fn run_task(&self, task: &Task, store: &RwLock<MemoryStore>) -> Result<TaskRun, EngineError> {
        let budget = self.budget()?;
        if self.config.mode == RunMode::MemoryBuilding && task.ground_truth.is_none() {
            return Err(EngineError::MissingGroundTruth(task.id.clone()));
        }
        let backend = RetryingChat {
            inner: self.backend,
            policy: self.config.retry,
        };
        let embedder = RetryingEmbedder {
            inner: self.embedder,
            policy: self.config.retry,
        };
        let clock = self.clock;
        let agents = self.agents;
        let original = task.table.clone();

        let mut ctx = TaskContext::new(&task.id, original.clone(), &task.question, budget);
        let mut rec = AnswerRecord {
            task_id: task.id.clone(),
            model_answer: String::new(),
            ground_truth: task.ground_truth.clone(),
            outer_rounds_used: 0,
            inner_steps_used: 0,
            accepted_by_checker: false,
            terminal_reason: TerminalReason::BudgetExhausted,
            checker_totals: Vec::new(),
            reflections: 0,
            parse_failures: 0,
            table_rows: original.num_rows(),
            table_columns: original.num_columns(),
            archive: None,
            error: None,
        };
        let mut last_answer: Option<String> = None;

        // Only fails on author/kind mismatches, which would be bugs here.
        macro_rules! log {
            ($author:expr, $payload:expr) => {
                ctx.append($author, $payload, clock).expect("engine writes well-formed entries")
            };
        }
        let solver = Author::Agent(AgentRole::Solver);

        'outer: while ctx.budget.can_start_round() {
            let round = ctx.budget.start_round();
            rec.outer_rounds_used = round;
            ctx.table_state = ctx.table_state.reset();
            log!(Author::System, Payload::BudgetUpdate { budget: ctx.budget });
            log!(Author::System, Payload::TableSnapshot { round, table: original.clone() });

            let retrieved = {
                let guard = store.read().expect("store lock poisoned");
                match guard.retrieve_solver(&original, &task.question, &embedder) {
                    Ok(r) => guard.hit_notes(&r),
                    Err(e) => {
                        rec.terminal_reason = TerminalReason::BackendFailure;
                        rec.error = Some(format!("solver-time retrieval: {e}"));
                        break 'outer;
                    }
                }
            };
            let reflection = ctx.view_latest_reflection().cloned();

            while ctx.budget.inner_remaining() > 0 {
                let remaining = ctx.budget.inner_remaining();
                ctx.budget.consume_step();
                rec.inner_steps_used += 1;
                let trace = ctx.view_round_trace(round);
                let input = SolverInput {
                    task_id: &task.id,
                    state: &ctx.table_state,
                    question: &task.question,
                    trace: &trace,
                    remaining,
                    retrieved: &retrieved,
                    reflection: reflection.as_ref(),
                };
                let step = match classify(agents.solver_call(&backend, &input)) {
                    Step::Done(s) => s,
                    Step::ParseFailure(e) => {
                        tracing::warn!(task = %task.id, "solver step discarded: {e}");
                        rec.parse_failures += 1;
                        continue;
                    }
                    Step::Fatal(e) => {
                        rec.terminal_reason = TerminalReason::BackendFailure;
                        rec.error = Some(format!("solver: {e}"));
                        break 'outer;
                    }
                };
                log!(solver, Payload::SolverStep { round, step: step.clone() });

                let answer = match &step.answer {
                    SolverAnswer::NotReady => {
                        match ctx.table_state.apply_intermediate(&step.intermediate_block) {
                            Ok(next) => ctx.table_state = next,
                            Err(e) => {
                                tracing::warn!(task = %task.id, "intermediate table ignored: {e}");
                                rec.parse_failures += 1;
                            }
                        }
                        continue;
                    }
                    SolverAnswer::Ready(a) => a.clone(),
                };
                last_answer = Some(answer.clone());

                let feedback = match classify(agents.checker_call(
                    &backend,
                    &task.id,
                    &original,
                    &task.question,
                    &answer,
                )) {
                    Step::Done(f) => f,
                    Step::ParseFailure(e) => {
                        tracing::warn!(task = %task.id, "checker response discarded: {e}");
                        rec.parse_failures += 1;
                        continue;
                    }
                    Step::Fatal(e) => {
                        rec.terminal_reason = TerminalReason::BackendFailure;
                        rec.error = Some(format!("checker: {e}"));
                        break 'outer;
                    }
                };
                log!(
                    Author::Agent(AgentRole::Checker),
                    Payload::CheckerFeedback { round, feedback: feedback.clone() }
                );
                rec.checker_totals.push(feedback.total_score);
                if feedback.is_accepted() {
                    rec.accepted_by_checker = true;
                    rec.terminal_reason = TerminalReason::CheckerAccepted;
                    break 'outer;
                }

                let trace = ctx.view_round_trace(round);
                match classify(agents.reflector_call(
                    &backend,
                    &task.id,
                    &original,
                    &task.question,
                    &trace,
                    &answer,
                    &feedback,
                )) {
                    Step::Done(report) => {
                        log!(Author::Agent(AgentRole::Reflector), Payload::Reflection { round, report });
                        rec.reflections += 1;
                    }
                    Step::ParseFailure(e) => {
                        tracing::warn!(task = %task.id, "reflection discarded: {e}");
                        rec.parse_failures += 1;
                    }
                    Step::Fatal(e) => {
                        rec.terminal_reason = TerminalReason::BackendFailure;
                        rec.error = Some(format!("reflector: {e}"));
                        break 'outer;
                    }
                }
                continue 'outer;
            }
        }

        rec.model_answer = match (&last_answer, rec.terminal_reason) {
            (Some(a), _) => a.clone(),
            (None, TerminalReason::BackendFailure) => String::new(),
            (None, _) => UNANSWERED.to_string(),
        };
        log!(
            Author::System,
            Payload::FinalAnswer(FinalAnswer {
                answer: rec.model_answer.clone(),
                accepted_by_checker: rec.accepted_by_checker,
            })
        );

        if self.config.mode == RunMode::MemoryBuilding && rec.terminal_reason != TerminalReason::BackendFailure {
            match self.archive(task, &ctx, &rec, &backend, &embedder, store) {
                Ok(a) => rec.archive = Some(a),
                Err(e) => {
                    tracing::warn!(task = %task.id, "not archived: {e}");
                    rec.error = Some(format!("archiver: {e}"));
                }
            }
        }
        Ok(TaskRun { record: rec, context: ctx })
    }

    fn archive(
        &self,
        task: &Task,
        ctx: &TaskContext,
        rec: &AnswerRecord,
        backend: &dyn ChatBackend,
        embedder: &dyn Embedder,
        store: &RwLock<MemoryStore>,
    ) -> Result<ArchiveRecord, String> {
        let ground_truth = task.ground_truth.as_deref().unwrap_or_default();
        let trace = ctx.view_trace();
        let input = SummaryInput {
            task_id: &task.id,
            table: &task.table,
            question: &task.question,
            model_answer: &rec.model_answer,
            ground_truth,
            trace: &trace,
            reflection: ctx.view_latest_reflection(),
        };
        let content = self
            .agents
            .archiver_sum_call(backend, &input)
            .map_err(|e| e.to_string())?;

        // Single writer: hold the lock across preparation and integration so
        // the note id and the neighbor set belong to the same store state.
        let mut guard = store.write().expect("store lock poisoned");
        let note = guard
            .prepare_note(content, embedder, self.clock)
            .map_err(|e: StoreError| e.to_string())?;
        let note_id = note.id.clone();
        let error_type = note.content.error_type;
        let mut should_evolve = None;
        let outcome = guard
            .integrate(note, embedder, self.clock, |note, neighbors| {
                match self.agents.archiver_evo_call(backend, &task.id, note, neighbors) {
                    Ok(d) => {
                        should_evolve = Some(d.should_evolve);
                        d
                    }
                    Err(e) => {
                        tracing::warn!(task = %task.id, "evolution skipped: {e}");
                        should_evolve = Some(false);
                        crate::agents::EvolutionDecision::no_evolution()
                    }
                }
            })
            .map_err(|e| e.to_string())?;
        Ok(ArchiveRecord {
            note_id,
            error_type,
            should_evolve,
            outcome,
        })
    }

    /// Runs `tasks` and returns their runs in task order. Memory building is
    /// sequential; inference fans out over `workers` threads.
    pub fn run_dataset(
        &self,
        tasks: &[Task],
        store: MemoryStore,
        workers: usize,
    ) -> Result<(Vec<TaskRun>, MemoryStore), EngineError> {
        self.budget()?;
        if workers == 0 {
            return Err(EngineError::Config("workers must be at least 1".into()));
        }
        if self.config.mode == RunMode::MemoryBuilding {
            if workers > 1 {
                return Err(EngineError::Config(
                    "memory building must run with a single worker".into(),
                ));
            }
            if let Some(t) = tasks.iter().find(|t| t.ground_truth.is_none()) {
                return Err(EngineError::MissingGroundTruth(t.id.clone()));
            }
        }
        let store = RwLock::new(store);
        let runs: Vec<TaskRun> = if workers == 1 {
            tasks
                .iter()
                .map(|t| self.run_task(t, &store))
                .collect::<Result<_, _>>()?
        } else {
            let next = AtomicUsize::new(0);
            let slots: Mutex<Vec<Option<Result<TaskRun, EngineError>>>> =
                Mutex::new((0..tasks.len()).map(|_| None).collect());
            std::thread::scope(|s| {
                for _ in 0..workers.min(tasks.len().max(1)) {
                    s.spawn(|| loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some(task) = tasks.get(i) else { break };
                        let run = self.run_task(task, &store);
                        slots.lock().expect("result slots poisoned")[i] = Some(run);
                    });
                }
            });
            slots
                .into_inner()
                .expect("result slots poisoned")
                .into_iter()
                .map(|r| r.expect("every task ran"))
                .collect::<Result<_, _>>()?
        };
        Ok((runs, store.into_inner().expect("store lock poisoned")))
    }
}
