//! Request builders and response parsers for the five agent calls.
//!
//! Each call is split into a pure prompt builder, a pure parser, and a thin
//! `*_call` helper that sends the request through a [`ChatBackend`].

pub mod grammar;
pub mod prompts;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{AgentRole, BackendError, ChatBackend, ChatRequest};
use crate::memory::note::{reason_is_none, ErrorType, MemoryNote, NoteContent};
use crate::table::{Table, TableState};
use grammar::{first, parse_fields, Field};
pub use prompts::PromptTemplates;

/// Checker acceptance bar: every criterion scored 2.
pub const FULL_SCORE: u8 = 6;
pub const MAX_CRITERION_SCORE: u8 = 2;

pub const NOT_READY: &str = "<NOT READY>";
const NOT_READY_ALT: &str = "<NOT_READY>";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("{role} response is missing field `{field}`")]
    MissingField { role: AgentRole, field: &'static str },
    #[error("{role} response is malformed: {message}")]
    Malformed { role: AgentRole, message: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("prompt template error: {0}")]
    Template(String),
}

impl AgentError {
    /// True for errors caused by the shape of a model response.
    pub fn is_parse(&self) -> bool {
        matches!(
            self,
            AgentError::MissingField { .. } | AgentError::Malformed { .. }
        )
    }

    fn malformed(role: AgentRole, message: impl Into<String>) -> Self {
        AgentError::Malformed {
            role,
            message: message.into(),
        }
    }
}

/// A solver's answer slot: either still working or a concrete answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum SolverAnswer {
    NotReady,
    Ready(String),
}

impl SolverAnswer {
    pub fn ready(&self) -> Option<&str> {
        match self {
            SolverAnswer::Ready(a) => Some(a),
            SolverAnswer::NotReady => None,
        }
    }
}

pub fn is_not_ready(text: &str) -> bool {
    let t = text.trim();
    t == NOT_READY || t == NOT_READY_ALT
}

impl From<String> for SolverAnswer {
    fn from(s: String) -> Self {
        if is_not_ready(&s) {
            SolverAnswer::NotReady
        } else {
            SolverAnswer::Ready(s)
        }
    }
}

impl From<SolverAnswer> for String {
    fn from(a: SolverAnswer) -> Self {
        match a {
            SolverAnswer::NotReady => NOT_READY.to_string(),
            SolverAnswer::Ready(s) => s,
        }
    }
}

/// One ReAct step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverStep {
    pub thought: String,
    pub action: String,
    /// Markdown table or the `<NOT CHANGED>` sentinel.
    pub intermediate_block: String,
    pub answer: SolverAnswer,
}

/// The steps taken in one outer round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub round_index: u32,
    pub steps: Vec<SolverStep>,
}

impl SolverTrace {
    pub fn new(round_index: u32) -> Self {
        assert!(round_index >= 1, "rounds are numbered from 1");
        SolverTrace {
            round_index,
            steps: Vec::new(),
        }
    }

    pub fn push(&mut self, step: SolverStep) {
        self.steps.push(step);
    }

    /// Numbered action list, one per line.
    pub fn render_actions(&self) -> String {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{}. {}", i + 1, s.action))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    AnswerType,
    Format,
    Evidence,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::AnswerType, Criterion::Format, Criterion::Evidence];

    pub fn heading(self) -> &'static str {
        match self {
            Criterion::AnswerType => "Answer Type Checking",
            Criterion::Format => "Format Validation",
            Criterion::Evidence => "Evidence Grounding",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionScore {
    pub score: u8,
    pub comment: String,
}

/// Rubric result for one answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckerFeedback {
    pub criteria: BTreeMap<Criterion, CriterionScore>,
    pub total_score: u8,
    pub final_comments: String,
}

impl CheckerFeedback {
    /// Builds feedback from exactly one score per criterion, recomputing the total.
    pub fn new(
        scores: [(u8, String); 3],
        final_comments: impl Into<String>,
    ) -> Result<Self, String> {
        let mut criteria = BTreeMap::new();
        for (criterion, (score, comment)) in Criterion::ALL.into_iter().zip(scores) {
            if score > MAX_CRITERION_SCORE {
                return Err(format!("score {score} out of range for {}", criterion.heading()));
            }
            criteria.insert(criterion, CriterionScore { score, comment });
        }
        let total_score = criteria.values().map(|c| c.score).sum();
        Ok(CheckerFeedback {
            criteria,
            total_score,
            final_comments: final_comments.into(),
        })
    }

    pub fn score(&self, c: Criterion) -> u8 {
        self.criteria[&c].score
    }

    pub fn scores(&self) -> [u8; 3] {
        Criterion::ALL.map(|c| self.score(c))
    }

    pub fn is_accepted(&self) -> bool {
        self.total_score == FULL_SCORE
    }

    /// Renders in the same layout the checker is asked to produce.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in Criterion::ALL {
            let s = &self.criteria[&c];
            out.push_str(&format!(
                "{}\nScore: {}\nComments: {}\n\n",
                c.heading(),
                s.score,
                s.comment
            ));
        }
        out.push_str(&format!(
            "Summary\nTotal Score: {}\nFinal Comments: {}",
            self.total_score, self.final_comments
        ));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionReport {
    pub diagnosis: String,
    pub improvement_plan: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvolutionAction {
    Strengthen,
    UpdateNeighbor,
}

impl fmt::Display for EvolutionAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvolutionAction::Strengthen => "strengthen",
            EvolutionAction::UpdateNeighbor => "update_neighbor",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvolutionDecision {
    pub should_evolve: bool,
    pub actions: Vec<EvolutionAction>,
    pub suggested_connections: Vec<String>,
    pub tags_to_update: Vec<String>,
    pub new_context_neighborhood: Vec<String>,
    pub new_tags_neighborhood: Vec<Vec<String>>,
}

impl EvolutionDecision {
    pub fn no_evolution() -> Self {
        Self::default()
    }

    pub fn has(&self, action: EvolutionAction) -> bool {
        self.should_evolve && self.actions.contains(&action)
    }

    /// A decision not to evolve must carry no payload.
    pub fn validate(&self) -> Result<(), String> {
        if !self.should_evolve
            && !(self.actions.is_empty()
                && self.suggested_connections.is_empty()
                && self.tags_to_update.is_empty()
                && self.new_context_neighborhood.is_empty()
                && self.new_tags_neighborhood.is_empty())
        {
            return Err("should_evolve is false but actions or updates were given".into());
        }
        Ok(())
    }
}

fn require<'a>(
    fields: &'a [Field],
    idx: usize,
    role: AgentRole,
    name: &'static str,
) -> Result<&'a str, AgentError> {
    first(fields, idx).ok_or(AgentError::MissingField { role, field: name })
}

fn strip_code_fences(block: &str) -> String {
    block
        .lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn join_list(items: &[String]) -> String {
    items.join(", ")
}

fn render_steps(steps: &[String]) -> String {
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Renders a memory note as solver-side guidance.
pub fn render_memory_for_solver(note: &MemoryNote, ordinal: usize) -> String {
    let c = &note.content;
    let mut out = format!(
        "Memory {ordinal}\n- Past Question: {}\n- Question Type: {}\n- Required Operations: {}\n- Correct Reasoning Steps: {}",
        c.question,
        c.question_type,
        join_list(&c.required_operations),
        render_steps(&c.correct_steps),
    );
    if !c.wrong_steps.is_empty() {
        out.push_str(&format!(
            "\n- Wrong Reasoning Steps: {}",
            render_steps(&c.wrong_steps)
        ));
    }
    out.push_str(&format!(
        "\n- Error Type: {}\n- Error Reason: {}",
        c.error_type, c.error_reason
    ));
    out
}

/// Renders a memory note with all its fields, for the evolution prompt.
pub fn render_memory_full(note: &MemoryNote) -> String {
    let c = &note.content;
    let mut out = format!(
        "- Memory ID: {}\n- Question ID: {}\n- Question: {}\n- Question Type: {}\n- Required operations: {}\n- Context: {}\n- Tags: {}\n- Keywords: {}\n- Correct Answer: {}\n- Model Answer: {}\n- Correct Steps: {}",
        note.id,
        c.question_id,
        c.question,
        c.question_type,
        join_list(&c.required_operations),
        c.context,
        join_list(&c.tags),
        join_list(&c.keywords),
        c.correct_answer,
        c.model_answer,
        render_steps(&c.correct_steps),
    );
    if !c.wrong_steps.is_empty() {
        out.push_str(&format!("\n- Wrong Steps: {}", render_steps(&c.wrong_steps)));
    }
    out.push_str(&format!(
        "\n- Error Type: {}\n- Error Reason: {}",
        c.error_type, c.error_reason
    ));
    out
}

/// Inputs to one solver step.
#[derive(Debug, Clone, Copy)]
pub struct SolverInput<'a> {
    pub task_id: &'a str,
    pub state: &'a TableState,
    pub question: &'a str,
    pub trace: &'a SolverTrace,
    /// Steps left in this round, counting the one about to be taken.
    pub remaining: u32,
    pub retrieved: &'a [MemoryNote],
    pub reflection: Option<&'a ReflectionReport>,
}

/// Inputs to the summarization call.
#[derive(Debug, Clone, Copy)]
pub struct SummaryInput<'a> {
    pub task_id: &'a str,
    pub table: &'a Table,
    pub question: &'a str,
    pub model_answer: &'a str,
    pub ground_truth: &'a str,
    pub trace: &'a SolverTrace,
    pub reflection: Option<&'a ReflectionReport>,
}

/// Prompt templates plus pass-through decoding parameters.
#[derive(Debug, Clone, Default)]
pub struct AgentSuite {
    pub templates: PromptTemplates,
    pub decode_params: BTreeMap<String, Value>,
}

const SOLVER_LABELS: [&str; 4] = ["Thought", "Action", "Intermediate table", "Answer"];
const CHECKER_LABELS: [&str; 8] = [
    "Answer Type Checking",
    "Format Validation",
    "Evidence Grounding",
    "Summary",
    "Score",
    "Comments",
    "Total Score",
    "Final Comments",
];
const REFLECTOR_LABELS: [&str; 2] = ["Diagnosis", "Improvement plan"];
const SUMMARY_LABELS: [&str; 9] = [
    "Question Type",
    "Required Operations",
    "Context",
    "Keywords",
    "Tags",
    "Correct Steps",
    "Wrong Steps",
    "Error Type",
    "Error Reason",
];
const EVOLUTION_LABELS: [&str; 6] = [
    "Should Evolve",
    "Actions",
    "Suggested Connections",
    "Tags to Update",
    "New Context Neighborhood",
    "New Tags Neighborhood",
];

impl AgentSuite {
    pub fn new(templates: PromptTemplates) -> Self {
        AgentSuite {
            templates,
            decode_params: BTreeMap::new(),
        }
    }

    fn request(
        &self,
        task_id: &str,
        role: AgentRole,
        system: &str,
        user: String,
    ) -> Result<ChatRequest, AgentError> {
        let user_text = user.trim_end().to_string();
        if user_text.trim().is_empty() {
            return Err(AgentError::Template(format!("{role} prompt rendered empty")));
        }
        Ok(ChatRequest {
            task_id: task_id.to_string(),
            role,
            system_text: self.templates.get(system)?.trim_end().to_string(),
            user_text,
            decode_params: self.decode_params.clone(),
        })
    }

    pub fn solver_request(&self, input: &SolverInput<'_>) -> Result<ChatRequest, AgentError> {
        if input.remaining < 1 {
            return Err(AgentError::Precondition(
                "solver called with no remaining steps".into(),
            ));
        }
        let t = &self.templates;
        let memory_block = if input.retrieved.is_empty() {
            String::new()
        } else {
            let memories = input
                .retrieved
                .iter()
                .enumerate()
                .map(|(i, n)| render_memory_for_solver(n, i + 1))
                .collect::<Vec<_>>()
                .join("\n\n");
            t.render("solver_memory", &[("memories", &memories)])?
        };
        let history_block = if input.trace.steps.is_empty() {
            String::new()
        } else {
            t.render("solver_history", &[("history", &input.trace.render_actions())])?
        };
        let reflection_block = match input.reflection {
            Some(r) => t.render(
                "solver_reflection",
                &[("diagnosis", &r.diagnosis), ("plan", &r.improvement_plan)],
            )?,
            None => String::new(),
        };
        let attempt = (input.trace.steps.len() + 1).to_string();
        let remaining = (input.remaining - 1).to_string();
        let table = input.state.current().to_markdown();
        let user = t.render(
            "solver_user",
            &[
                ("memory_block", &memory_block),
                ("attempt", &attempt),
                ("remaining", &remaining),
                ("table", &table),
                ("question", input.question),
                ("history_block", &history_block),
                ("reflection_block", &reflection_block),
            ],
        )?;
        self.request(input.task_id, AgentRole::Solver, "solver_system", user)
    }

    pub fn parse_solver(&self, text: &str) -> Result<SolverStep, AgentError> {
        let role = AgentRole::Solver;
        let fields = parse_fields(text, &SOLVER_LABELS);
        let thought = require(&fields, 0, role, "thought")?.to_string();
        let action = require(&fields, 1, role, "action")?.to_string();
        let block = strip_code_fences(require(&fields, 2, role, "intermediate table")?)
            .trim()
            .to_string();
        if block.is_empty() {
            return Err(AgentError::malformed(role, "intermediate table is empty"));
        }
        let answer = require(&fields, 3, role, "answer")?;
        if answer.is_empty() {
            return Err(AgentError::malformed(role, "answer is empty"));
        }
        Ok(SolverStep {
            thought,
            action,
            intermediate_block: block,
            answer: SolverAnswer::from(answer.to_string()),
        })
    }

    pub fn solver_call(
        &self,
        backend: &dyn ChatBackend,
        input: &SolverInput<'_>,
    ) -> Result<SolverStep, AgentError> {
        let req = self.solver_request(input)?;
        self.parse_solver(&backend.chat(&req)?)
    }

    pub fn checker_request(
        &self,
        task_id: &str,
        table: &Table,
        question: &str,
        answer: &str,
    ) -> Result<ChatRequest, AgentError> {
        if is_not_ready(answer) || answer.trim().is_empty() {
            return Err(AgentError::Precondition(
                "checker needs a concrete answer".into(),
            ));
        }
        let user = self.templates.render(
            "checker_user",
            &[
                ("table", &table.to_markdown()),
                ("question", question),
                ("answer", answer),
            ],
        )?;
        self.request(task_id, AgentRole::Checker, "checker_system", user)
    }

    pub fn parse_checker(&self, text: &str) -> Result<CheckerFeedback, AgentError> {
        let role = AgentRole::Checker;
        let fields = parse_fields(text, &CHECKER_LABELS);
        let mut scores: [Option<(u8, String)>; 3] = [None, None, None];
        let mut section: Option<usize> = None;
        let mut parsed_total: Option<i64> = None;
        let mut final_comments = String::new();
        for f in &fields {
            match f.label {
                0..=2 => section = Some(f.label),
                3 => section = None,
                4 => {
                    let Some(s) = section else { continue };
                    let score = grammar::leading_int(&f.value).ok_or_else(|| {
                        AgentError::malformed(role, format!("unreadable score `{}`", f.value))
                    })?;
                    if !(0..=i64::from(MAX_CRITERION_SCORE)).contains(&score) {
                        return Err(AgentError::malformed(
                            role,
                            format!("score {score} out of range for {}", CHECKER_LABELS[s]),
                        ));
                    }
                    scores[s] = Some((score as u8, String::new()));
                }
                5 => {
                    if let Some(Some(entry)) = section.map(|s| &mut scores[s]) {
                        entry.1 = f.value.clone();
                    }
                }
                6 => parsed_total = grammar::leading_int(&f.value),
                7 => final_comments = f.value.clone(),
                _ => unreachable!(),
            }
        }
        let [a, b, c] = scores;
        let missing = |name| AgentError::MissingField { role, field: name };
        let scores = [
            a.ok_or_else(|| missing("answer type checking score"))?,
            b.ok_or_else(|| missing("format validation score"))?,
            c.ok_or_else(|| missing("evidence grounding score"))?,
        ];
        let feedback =
            CheckerFeedback::new(scores, final_comments).map_err(|m| AgentError::malformed(role, m))?;
        match parsed_total {
            Some(t) if t != i64::from(feedback.total_score) => tracing::warn!(
                parsed = t,
                recomputed = feedback.total_score,
                "checker total disagrees with its criterion scores; using the recomputed total"
            ),
            None => tracing::warn!("checker response has no total score; recomputed it"),
            _ => {}
        }
        Ok(feedback)
    }

    pub fn checker_call(
        &self,
        backend: &dyn ChatBackend,
        task_id: &str,
        table: &Table,
        question: &str,
        answer: &str,
    ) -> Result<CheckerFeedback, AgentError> {
        let req = self.checker_request(task_id, table, question, answer)?;
        self.parse_checker(&backend.chat(&req)?)
    }

    pub fn reflector_request(
        &self,
        task_id: &str,
        table: &Table,
        question: &str,
        trace: &SolverTrace,
        answer: &str,
        feedback: &CheckerFeedback,
    ) -> Result<ChatRequest, AgentError> {
        if feedback.is_accepted() {
            return Err(AgentError::Precondition(
                "reflector called on an accepted answer".into(),
            ));
        }
        let user = self.templates.render(
            "reflector_user",
            &[
                ("question", question),
                ("table", &table.to_markdown()),
                ("history", &trace.render_actions()),
                ("answer", answer),
                ("feedback", &feedback.render()),
            ],
        )?;
        self.request(task_id, AgentRole::Reflector, "reflector_system", user)
    }

    pub fn parse_reflector(&self, text: &str) -> Result<ReflectionReport, AgentError> {
        let role = AgentRole::Reflector;
        let fields = parse_fields(text, &REFLECTOR_LABELS);
        let diagnosis = require(&fields, 0, role, "diagnosis")?;
        let plan = require(&fields, 1, role, "improvement plan")?;
        if diagnosis.is_empty() || plan.is_empty() {
            return Err(AgentError::malformed(role, "empty diagnosis or plan"));
        }
        Ok(ReflectionReport {
            diagnosis: diagnosis.to_string(),
            improvement_plan: plan.to_string(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn reflector_call(
        &self,
        backend: &dyn ChatBackend,
        task_id: &str,
        table: &Table,
        question: &str,
        trace: &SolverTrace,
        answer: &str,
        feedback: &CheckerFeedback,
    ) -> Result<ReflectionReport, AgentError> {
        let req = self.reflector_request(task_id, table, question, trace, answer, feedback)?;
        self.parse_reflector(&backend.chat(&req)?)
    }

    pub fn archiver_sum_request(&self, input: &SummaryInput<'_>) -> Result<ChatRequest, AgentError> {
        let reflection = match input.reflection {
            Some(r) => format!(
                "Diagnosis: {}\nImprovement plan: {}",
                r.diagnosis, r.improvement_plan
            ),
            None => "none".to_string(),
        };
        let history = if input.trace.steps.is_empty() {
            "none".to_string()
        } else {
            input.trace.render_actions()
        };
        let user = self.templates.render(
            "archiver_sum_user",
            &[
                ("question", input.question),
                ("table", &input.table.to_markdown()),
                ("model_answer", input.model_answer),
                ("ground_truth", input.ground_truth),
                ("history", &history),
                ("reflection", &reflection),
            ],
        )?;
        self.request(input.task_id, AgentRole::ArchiverSum, "archiver_sum_system", user)
    }

    /// Parses the summary into note content. Fields that identify the episode
    /// (question id, question, answers) come from `input`, not the model.
    pub fn parse_archiver_sum(
        &self,
        text: &str,
        input: &SummaryInput<'_>,
    ) -> Result<NoteContent, AgentError> {
        let role = AgentRole::ArchiverSum;
        let fields = parse_fields(text, &SUMMARY_LABELS);
        let list = |idx: usize, name: &'static str| -> Result<Vec<String>, AgentError> {
            grammar::parse_string_list(require(&fields, idx, role, name)?)
                .map_err(|m| AgentError::malformed(role, format!("{name}: {m}")))
        };
        let question_type = require(&fields, 0, role, "question type")?
            .trim_matches(|c| c == '\'' || c == '"')
            .to_string();
        let required_operations = list(1, "required operations")?;
        let context = require(&fields, 2, role, "context")?.to_string();
        let keywords = list(3, "keywords")?;
        let tags = list(4, "tags")?;
        let correct_steps = list(5, "correct steps")?;
        let wrong_steps = list(6, "wrong steps")?;
        let raw_type = require(&fields, 7, role, "error type")?;
        let mut error_reason = require(&fields, 8, role, "error reason")?.to_string();
        let error_type = match ErrorType::recognize(raw_type) {
            Some(t) => t,
            None => {
                tracing::warn!(label = raw_type, "unknown error type; recording it as `other`");
                ErrorType::Other
            }
        };
        if error_type == ErrorType::None {
            if !reason_is_none(&error_reason) {
                return Err(AgentError::malformed(
                    role,
                    "error type is none but an error reason was given",
                ));
            }
            error_reason = "none".into();
        } else if reason_is_none(&error_reason) {
            return Err(AgentError::malformed(
                role,
                format!("error type {error_type} has no error reason"),
            ));
        }
        Ok(NoteContent {
            question_id: input.task_id.to_string(),
            question: input.question.to_string(),
            question_type,
            required_operations,
            context,
            keywords,
            tags,
            correct_answer: input.ground_truth.to_string(),
            model_answer: input.model_answer.to_string(),
            correct_steps,
            wrong_steps,
            error_type,
            error_reason,
        })
    }

    pub fn archiver_sum_call(
        &self,
        backend: &dyn ChatBackend,
        input: &SummaryInput<'_>,
    ) -> Result<NoteContent, AgentError> {
        let req = self.archiver_sum_request(input)?;
        self.parse_archiver_sum(&backend.chat(&req)?, input)
    }

    pub fn archiver_evo_request(
        &self,
        task_id: &str,
        note: &MemoryNote,
        neighbors: &[MemoryNote],
    ) -> Result<ChatRequest, AgentError> {
        let rendered_neighbors = if neighbors.is_empty() {
            "none".to_string()
        } else {
            neighbors
                .iter()
                .enumerate()
                .map(|(i, n)| format!("Memory Note {}\n{}", i + 1, render_memory_full(n)))
                .collect::<Vec<_>>()
                .join("\n\n")
        };
        let user = self.templates.render(
            "archiver_evo_user",
            &[
                ("note", &render_memory_full(note)),
                ("neighbors", &rendered_neighbors),
            ],
        )?;
        self.request(task_id, AgentRole::ArchiverEvo, "archiver_evo_system", user)
    }

    pub fn parse_archiver_evo(&self, text: &str) -> Result<EvolutionDecision, AgentError> {
        let role = AgentRole::ArchiverEvo;
        let fields = parse_fields(text, &EVOLUTION_LABELS);
        let should_raw = require(&fields, 0, role, "should evolve")?;
        let should_evolve = grammar::parse_bool(should_raw).ok_or_else(|| {
            AgentError::malformed(role, format!("unreadable should-evolve flag `{should_raw}`"))
        })?;
        let opt_list = |idx: usize, name: &str| -> Result<Vec<String>, AgentError> {
            first(&fields, idx)
                .map(grammar::parse_string_list)
                .transpose()
                .map(Option::unwrap_or_default)
                .map_err(|m| AgentError::malformed(role, format!("{name}: {m}")))
        };
        let actions = opt_list(1, "actions")?
            .into_iter()
            .map(|a| {
                let norm = a.trim().to_lowercase().replace([' ', '-'], "_");
                match norm.as_str() {
                    "strengthen" => Ok(EvolutionAction::Strengthen),
                    "update_neighbor" | "update_neighbors" => Ok(EvolutionAction::UpdateNeighbor),
                    _ => Err(AgentError::malformed(role, format!("unknown action `{a}`"))),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut dedup = Vec::new();
        for a in actions {
            if !dedup.contains(&a) {
                dedup.push(a);
            }
        }
        let new_tags_neighborhood = first(&fields, 5)
            .map(grammar::parse_nested_list)
            .transpose()
            .map_err(|m| AgentError::malformed(role, format!("new tags neighborhood: {m}")))?
            .unwrap_or_default();
        let decision = EvolutionDecision {
            should_evolve,
            actions: dedup,
            suggested_connections: opt_list(2, "suggested connections")?,
            tags_to_update: opt_list(3, "tags to update")?,
            new_context_neighborhood: opt_list(4, "new context neighborhood")?,
            new_tags_neighborhood,
        };
        decision
            .validate()
            .map_err(|m| AgentError::malformed(role, m))?;
        Ok(decision)
    }

    pub fn archiver_evo_call(
        &self,
        backend: &dyn ChatBackend,
        task_id: &str,
        note: &MemoryNote,
        neighbors: &[MemoryNote],
    ) -> Result<EvolutionDecision, AgentError> {
        let req = self.archiver_evo_request(task_id, note, neighbors)?;
        self.parse_archiver_evo(&backend.chat(&req)?)
    }
}

#[cfg(test)]
mod tests;
