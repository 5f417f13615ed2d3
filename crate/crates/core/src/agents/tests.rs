use super::*;
use crate::backend::{BackendError, EmbeddingVector, Transcript};
use chrono::{TimeZone, Utc};

const TRANSCRIPT: &str = include_str!("../../assets/case_study/transcript.jsonl");
const TABLE_MD: &str = include_str!("../../assets/case_study/table.md");
const QUESTION: &str = "who was the top goalscorer previous to landon donovan?";

fn response(role: AgentRole, index: usize) -> String {
    Transcript::from_jsonl(TRANSCRIPT)
        .unwrap()
        .entries
        .into_iter()
        .find(|e| e.role == role && e.index == index)
        .unwrap()
        .response
}

fn suite() -> AgentSuite {
    AgentSuite::default()
}

fn table() -> Table {
    Table::parse_markdown(TABLE_MD).unwrap()
}

fn fixed(text: String) -> impl Fn(&ChatRequest) -> Result<String, BackendError> {
    move |_| Ok(text.clone())
}

fn sample_note(id: &str) -> MemoryNote {
    let t = Utc.timestamp_opt(0, 0).unwrap();
    MemoryNote {
        id: id.into(),
        content: NoteContent {
            question_id: "q-1".into(),
            question: "who scored the most goals?".into(),
            question_type: "aggregation".into(),
            required_operations: vec!["find maximum".into(), "compare".into()],
            context: "ctx".into(),
            keywords: vec!["goals".into()],
            tags: vec!["sports".into()],
            correct_answer: "A".into(),
            model_answer: "A".into(),
            correct_steps: vec!["Find the maximum value in the 'Goals' column".into()],
            wrong_steps: vec![],
            error_type: ErrorType::None,
            error_reason: "none".into(),
        },
        links: vec![],
        embedding: EmbeddingVector::new(vec![1.0]).unwrap(),
        created_at: t,
        updated_at: t,
    }
}

#[test]
fn solver_round_one_answers_dempsey() {
    let state = TableState::new(table());
    let trace = SolverTrace::new(1);
    let notes = [sample_note("note-00000")];
    let input = SolverInput {
        task_id: "nu-2024",
        state: &state,
        question: QUESTION,
        trace: &trace,
        remaining: 5,
        retrieved: &notes,
        reflection: None,
    };
    let step = suite()
        .solver_call(&fixed(response(AgentRole::Solver, 0)), &input)
        .unwrap();
    assert_eq!(step.answer, SolverAnswer::Ready("Clint Dempsey".into()));
    assert!(crate::table::is_not_changed(&step.intermediate_block));
    assert_eq!(
        step.action,
        "Identify the player with the second-highest number of goals"
    );
}

#[test]
fn solver_round_two_returns_filtered_table() {
    let step = suite()
        .parse_solver(&response(AgentRole::Solver, 1))
        .unwrap();
    assert_eq!(step.answer, SolverAnswer::NotReady);
    let next = TableState::new(table())
        .apply_intermediate(&step.intermediate_block)
        .unwrap();
    assert_eq!(next.current().num_rows(), 5);
    assert_eq!(next.current().rows()[0][1], "Eric Wynalda");
    assert_eq!(next.current().rows()[0][2], "34");
}

#[test]
fn solver_missing_action_is_reported() {
    let err = suite()
        .parse_solver("Thought: x\nIntermediate table: <NOT CHANGED>\nAnswer: y")
        .unwrap_err();
    assert!(matches!(
        err,
        AgentError::MissingField {
            field: "action",
            ..
        }
    ));
    assert!(err.is_parse());
}

#[test]
fn solver_accepts_underscore_sentinel_and_fenced_tables() {
    let text = "Thought: t\nAction: a\nIntermediate table:\n```\n| a |\n| --- |\n| 1 |\n```\nAnswer: <NOT_READY>";
    let step = suite().parse_solver(text).unwrap();
    assert_eq!(step.answer, SolverAnswer::NotReady);
    assert_eq!(step.intermediate_block, "| a |\n| --- |\n| 1 |");
}

#[test]
fn solver_prompt_layout() {
    let state = TableState::new(table());
    let mut trace = SolverTrace::new(2);
    trace.push(SolverStep {
        thought: "t".into(),
        action: "Filter players".into(),
        intermediate_block: "<NOT CHANGED>".into(),
        answer: SolverAnswer::NotReady,
    });
    let reflection = ReflectionReport {
        diagnosis: "D".into(),
        improvement_plan: "P".into(),
    };
    let notes = [sample_note("note-00000")];
    let input = SolverInput {
        task_id: "t",
        state: &state,
        question: QUESTION,
        trace: &trace,
        remaining: 4,
        retrieved: &notes,
        reflection: Some(&reflection),
    };
    let req = suite().solver_request(&input).unwrap();
    let text = &req.user_text;
    let pos = |needle: &str| text.find(needle).unwrap_or_else(|| panic!("{needle} missing in\n{text}"));
    assert!(pos("<Related Memory>") < pos("This is attempt 2. You have 3 attempts remaining."));
    assert!(pos("attempts remaining") < pos("<Table>"));
    assert!(pos("<Table>") < pos("<Question>"));
    assert!(pos("<Question>") < pos("<Action History>\n1. Filter players"));
    assert!(pos("<Action History>") < pos("<Reflector Result>\nDiagnosis: D\nImprovement plan: P"));
    assert!(text.contains("- Past Question: who scored the most goals?"));
    assert!(text.contains(&table().to_markdown()));
    assert_eq!(req.role, AgentRole::Solver);

    // identical inputs, identical bytes
    assert_eq!(suite().solver_request(&input).unwrap(), req);
}

#[test]
fn solver_prompt_omits_empty_blocks() {
    let state = TableState::new(table());
    let trace = SolverTrace::new(1);
    let input = SolverInput {
        task_id: "t",
        state: &state,
        question: QUESTION,
        trace: &trace,
        remaining: 5,
        retrieved: &[],
        reflection: None,
    };
    let req = suite().solver_request(&input).unwrap();
    assert!(req.user_text.starts_with("Now, here is your actual Solver task. This is attempt 1. You have 4 attempts remaining."));
    assert!(!req.user_text.contains("<Related Memory>"));
    assert!(!req.user_text.contains("<Action History>"));
    assert!(!req.user_text.contains("<Reflector Result>"));
    assert!(req.user_text.ends_with(QUESTION));

    let zero = SolverInput { remaining: 0, ..input };
    assert!(matches!(
        suite().solver_request(&zero),
        Err(AgentError::Precondition(_))
    ));
}

#[test]
fn checker_case_study_scores() {
    let s = suite();
    let first = s
        .checker_call(
            &fixed(response(AgentRole::Checker, 0)),
            "t",
            &table(),
            QUESTION,
            "Clint Dempsey",
        )
        .unwrap();
    assert_eq!(first.scores(), [2, 2, 0]);
    assert_eq!(first.total_score, 4);
    assert!(!first.is_accepted());
    assert!(first.final_comments.starts_with("The answer is incorrect"));

    let second = s.parse_checker(&response(AgentRole::Checker, 1)).unwrap();
    assert_eq!(second.scores(), [2, 2, 2]);
    assert_eq!(second.total_score, 6);
    assert!(second.is_accepted());
}

#[test]
fn checker_feedback_render_round_trips() {
    let fb = suite().parse_checker(&response(AgentRole::Checker, 0)).unwrap();
    assert_eq!(suite().parse_checker(&fb.render()).unwrap(), fb);
}

#[test]
fn checker_errors() {
    let s = suite();
    let out_of_range = "Answer Type Checking\nScore: 3\nComments: c\nFormat Validation\nScore: 2\nComments: c\nEvidence Grounding\nScore: 2\nComments: c";
    assert!(matches!(
        s.parse_checker(out_of_range),
        Err(AgentError::Malformed { .. })
    ));
    let missing = "Answer Type Checking\nScore: 2\nComments: c\nFormat Validation\nScore: 2\nComments: c";
    assert!(matches!(
        s.parse_checker(missing),
        Err(AgentError::MissingField { .. })
    ));
    assert!(matches!(
        s.checker_request("t", &table(), QUESTION, "<NOT READY>"),
        Err(AgentError::Precondition(_))
    ));
}

#[test]
fn checker_total_mismatch_uses_recomputed_total() {
    let text = "Answer Type Checking\nScore: 2\nComments: c\nFormat Validation\nScore: 1\nComments: c\nEvidence Grounding\nScore: 2\nComments: c\nSummary\nTotal Score: 6\nFinal Comments: ok";
    let fb = suite().parse_checker(text).unwrap();
    assert_eq!(fb.total_score, 5);
    assert!(!fb.is_accepted());
}

#[test]
fn full_score_iff_every_criterion_is_two() {
    for a in 0..=2u8 {
        for b in 0..=2u8 {
            for c in 0..=2u8 {
                let fb = CheckerFeedback::new(
                    [(a, String::new()), (b, String::new()), (c, String::new())],
                    "",
                )
                .unwrap();
                assert_eq!(fb.is_accepted(), a == 2 && b == 2 && c == 2);
                assert_eq!(fb.total_score, a + b + c);
            }
        }
    }
}

#[test]
fn reflector_case_study() {
    let s = suite();
    let fb = s.parse_checker(&response(AgentRole::Checker, 0)).unwrap();
    let mut trace = SolverTrace::new(1);
    trace.push(s.parse_solver(&response(AgentRole::Solver, 0)).unwrap());
    let report = s
        .reflector_call(
            &fixed(response(AgentRole::Reflector, 0)),
            "t",
            &table(),
            QUESTION,
            &trace,
            "Clint Dempsey",
            &fb,
        )
        .unwrap();
    assert!(report.diagnosis.contains("interpretation of 'previous to'"));
    assert!(report.improvement_plan.starts_with("To improve"));

    let req = s
        .reflector_request("t", &table(), QUESTION, &trace, "Clint Dempsey", &fb)
        .unwrap();
    assert!(req
        .user_text
        .contains("1. Identify the player with the second-highest number of goals"));
    assert!(req.user_text.contains("Total Score: 4"));
}

#[test]
fn reflector_errors() {
    let s = suite();
    assert!(s.parse_reflector("").unwrap_err().is_parse());
    let accepted = s.parse_checker(&response(AgentRole::Checker, 1)).unwrap();
    assert!(matches!(
        s.reflector_request("t", &table(), QUESTION, &SolverTrace::new(1), "x", &accepted),
        Err(AgentError::Precondition(_))
    ));
}

fn summary_input<'a>(
    table: &'a Table,
    trace: &'a SolverTrace,
    reflection: Option<&'a ReflectionReport>,
) -> SummaryInput<'a> {
    SummaryInput {
        task_id: "nu-2024",
        table,
        question: QUESTION,
        model_answer: "Eric Wynalda",
        ground_truth: "Eric Wynalda",
        trace,
        reflection,
    }
}

#[test]
fn archiver_summary_case_study() {
    let s = suite();
    let table = table();
    let trace = SolverTrace::new(2);
    let input = summary_input(&table, &trace, None);
    let note = s
        .archiver_sum_call(&fixed(response(AgentRole::ArchiverSum, 0)), &input)
        .unwrap();
    assert_eq!(note.question_type, "lookup");
    assert_eq!(note.required_operations, vec!["filter", "compare", "identify max"]);
    assert_eq!(note.tags.len(), 4);
    assert_eq!(note.correct_steps.len(), 3);
    assert!(note.correct_steps[0].contains("Donovan's start in 2000"));
    assert!(note.wrong_steps.is_empty());
    assert_eq!(note.error_type, ErrorType::None);
    assert_eq!(note.error_reason, "none");
    assert_eq!(note.question_id, "nu-2024");
    assert_eq!(note.correct_answer, "Eric Wynalda");
    assert!(note.error_fields_consistent());
}

#[test]
fn archiver_summary_unknown_error_type_maps_to_other() {
    let text = "Question Type: count\nRequired Operations: [count]\nContext: c\nKeywords: [k]\nTags: [t]\nCorrect Steps: [a]\nWrong Steps: [b]\nError Type: hallucination\nError Reason: invented a row";
    let table = table();
    let trace = SolverTrace::new(1);
    let note = suite()
        .parse_archiver_sum(text, &summary_input(&table, &trace, None))
        .unwrap();
    assert_eq!(note.error_type, ErrorType::Other);
    assert_eq!(note.wrong_steps, vec!["b"]);
}

#[test]
fn archiver_summary_rejects_inconsistent_error_fields() {
    let text = "Question Type: count\nRequired Operations: []\nContext: c\nKeywords: []\nTags: []\nCorrect Steps: []\nWrong Steps: []\nError Type: logical_reasoning\nError Reason: none";
    let table = table();
    let trace = SolverTrace::new(1);
    assert!(suite()
        .parse_archiver_sum(text, &summary_input(&table, &trace, None))
        .unwrap_err()
        .is_parse());
}

#[test]
fn archiver_summary_prompt_lists_history_and_reflection() {
    let s = suite();
    let table = table();
    let mut trace = SolverTrace::new(2);
    trace.push(s.parse_solver(&response(AgentRole::Solver, 1)).unwrap());
    trace.push(s.parse_solver(&response(AgentRole::Solver, 2)).unwrap());
    let reflection = s.parse_reflector(&response(AgentRole::Reflector, 0)).unwrap();
    let req = s
        .archiver_sum_request(&summary_input(&table, &trace, Some(&reflection)))
        .unwrap();
    assert!(req.user_text.contains("1. Filter players whose career ended before 2000"));
    assert!(req.user_text.contains("2. Identify top goalscorer among players"));
    assert!(req.user_text.contains("Diagnosis: The reasoner incorrectly"));
    assert!(req.user_text.contains("<Ground Truth>\nEric Wynalda"));
}

#[test]
fn archiver_evolution_case_study() {
    let s = suite();
    let note = sample_note("note-00001");
    let decision = s
        .archiver_evo_call(
            &fixed(response(AgentRole::ArchiverEvo, 0)),
            "t",
            &note,
            &[],
        )
        .unwrap();
    assert_eq!(decision, EvolutionDecision::no_evolution());
    assert!(!decision.should_evolve);
}

#[test]
fn archiver_evolution_with_actions() {
    let text = "Should Evolve: true\nActions: ['strengthen']\nSuggested Connections: ['note-00003', 'note-00007']\nTags to Update: ['lookup', 'timeline']\nNew Context Neighborhood: [ ]\nNew Tags Neighborhood: [ ]";
    let d = suite().parse_archiver_evo(text).unwrap();
    assert!(d.should_evolve);
    assert_eq!(d.actions, vec![EvolutionAction::Strengthen]);
    assert_eq!(d.suggested_connections, vec!["note-00003", "note-00007"]);
    assert_eq!(d.tags_to_update, vec!["lookup", "timeline"]);
    assert!(d.has(EvolutionAction::Strengthen));
    assert!(!d.has(EvolutionAction::UpdateNeighbor));

    let update = "Should Evolve: true\nActions: [strengthen, update_neighbor]\nSuggested Connections: []\nTags to Update: []\nNew Context Neighborhood: ['new context, with comma']\nNew Tags Neighborhood: [['a', 'b']]";
    let d = suite().parse_archiver_evo(update).unwrap();
    assert_eq!(d.new_context_neighborhood, vec!["new context, with comma"]);
    assert_eq!(d.new_tags_neighborhood, vec![vec!["a".to_string(), "b".into()]]);
}

#[test]
fn archiver_evolution_errors() {
    let s = suite();
    assert!(s
        .parse_archiver_evo("Should Evolve: false\nActions: ['strengthen']")
        .unwrap_err()
        .is_parse());
    assert!(s
        .parse_archiver_evo("Should Evolve: true\nActions: ['merge']")
        .unwrap_err()
        .is_parse());
    assert!(s.parse_archiver_evo("Actions: []").unwrap_err().is_parse());
}

#[test]
fn evolution_prompt_shows_neighbor_ids() {
    let req = suite()
        .archiver_evo_request("t", &sample_note("note-00009"), &[sample_note("note-00002")])
        .unwrap();
    assert!(req.user_text.contains("- Memory ID: note-00009"));
    assert!(req.user_text.contains("Memory Note 1\n- Memory ID: note-00002"));
}
