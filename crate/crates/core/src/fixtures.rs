//! Bundled worked example and builders for scripted agent responses.
//!
//! The case study is a single table question replayed through every agent:
//! a first answer rejected with total score 4, one reflection, a second round
//! that filters the table before answering, acceptance at 6, then archiving
//! without evolution.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::backend::{AgentRole, BackendError, ChatBackend, ChatRequest, Transcript};
use crate::eval::ingest::{parse_normalized, TaskRecord};

pub const CASE_STUDY_TASK: &str = include_str!("../assets/case_study/task.jsonl");
pub const CASE_STUDY_TRANSCRIPT: &str = include_str!("../assets/case_study/transcript.jsonl");
pub const CASE_STUDY_ANSWER: &str = "Eric Wynalda";

pub fn case_study_record() -> TaskRecord {
    parse_normalized(CASE_STUDY_TASK, "case_study/task.jsonl")
        .expect("bundled task parses")
        .remove(0)
}

pub fn case_study_transcript() -> Transcript {
    Transcript::from_jsonl(CASE_STUDY_TRANSCRIPT).expect("bundled transcript parses")
}

pub fn solver_response(intermediate: &str, answer: &str) -> String {
    format!(
        "- Thought: look at the table\n- Action: inspect rows\n- Intermediate table: {intermediate}\n- Answer: {answer}"
    )
}

pub fn not_ready_response() -> String {
    solver_response("<NOT CHANGED>", "<NOT READY>")
}

pub fn checker_response(scores: [u8; 3]) -> String {
    let total: u32 = scores.iter().map(|&s| u32::from(s)).sum();
    format!(
        "Answer Type Checking\n- Score: {}\n- Comments: type\n\nFormat Validation\n- Score: {}\n- Comments: format\n\nEvidence Grounding\n- Score: {}\n- Comments: evidence\n\nSummary\n- Total Score: {total}\n- Final Comments: done",
        scores[0], scores[1], scores[2]
    )
}

pub fn reflector_response() -> String {
    "- Diagnosis: the answer ignored part of the question\n- Improvement plan: re-read the question and filter first".into()
}

pub fn summary_response(context: &str, tags: &[&str], error_type: &str) -> String {
    let reason = if error_type == "none" { "none" } else { "a mistake was made" };
    format!(
        "- Question Type: lookup\n- Required Operations: ['filter']\n- Context: {context}\n- Keywords: ['k']\n- Tags: {tags:?}\n- Correct Steps: ['find the row']\n- Wrong Steps: [ ]\n- Error Type: {error_type}\n- Error Reason: {reason}"
    )
}

pub fn no_evolution_response() -> String {
    "- Should Evolve: false\n- Actions: [ ]\n- Suggested Connections: [ ]\n- Tags to Update: [ ]\n- New Context Neighborhood: [ ]\n- New Tags Neighborhood: [ ]".into()
}

/// Backend that answers by role and counts calls per role.
pub struct ScriptedBackend<F> {
    respond: F,
    counts: [AtomicUsize; AgentRole::ALL.len()],
}

impl<F> ScriptedBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync,
{
    pub fn new(respond: F) -> Self {
        ScriptedBackend {
            respond,
            counts: Default::default(),
        }
    }

    pub fn calls(&self, role: AgentRole) -> usize {
        let i = AgentRole::ALL.iter().position(|r| *r == role).expect("known role");
        self.counts[i].load(Ordering::SeqCst)
    }

    pub fn total_calls(&self) -> usize {
        self.counts.iter().map(|c| c.load(Ordering::SeqCst)).sum()
    }
}

impl<F> ChatBackend for ScriptedBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn chat(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let i = AgentRole::ALL
            .iter()
            .position(|r| *r == request.role)
            .expect("known role");
        self.counts[i].fetch_add(1, Ordering::SeqCst);
        (self.respond)(request)
    }

    fn identity(&self) -> String {
        "scripted".into()
    }
}
