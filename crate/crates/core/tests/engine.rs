use std::sync::{Mutex, RwLock};

use maple_core::agents::AgentSuite;
use maple_core::backend::{AgentRole, BackendError, HashEmbedder, ReplayBackend};
use maple_core::clock::FixedClock;
use maple_core::engine::{Engine, EngineConfig, RetryPolicy, RunMode, Task, TerminalReason, UNANSWERED};
use maple_core::fixtures::*;
use maple_core::memory::{ErrorType, MemoryStore, RetrievalConfig};
use maple_core::pool::{import_log, EntryKind};
use maple_core::table::Table;

fn config(inner: u32, outer: u32, mode: RunMode) -> EngineConfig {
    EngineConfig {
        max_inner_steps: inner,
        max_outer_rounds: outer,
        mode,
        retry: RetryPolicy { max_attempts: 3, initial_backoff_ms: 0 },
    }
}

fn small_task(id: &str) -> Task {
    Task {
        id: id.into(),
        table: Table::new(vec!["name".into(), "goals".into()], vec![vec!["a".into(), "3".into()]]).unwrap(),
        question: format!("question {id}"),
        ground_truth: Some("a".into()),
    }
}

fn store() -> RwLock<MemoryStore> {
    RwLock::new(MemoryStore::new(64, RetrievalConfig::default()).unwrap())
}

#[test]
fn case_study_replay() {
    let agents = AgentSuite::default();
    let backend = ReplayBackend::new(case_study_transcript());
    let embedder = HashEmbedder::new(64);
    let clock = FixedClock::default();
    let engine = Engine {
        agents: &agents,
        backend: &backend,
        embedder: &embedder,
        clock: &clock,
        config: config(5, 5, RunMode::MemoryBuilding),
    };
    let store = store();
    let run = engine.run_task(&case_study_record().to_task(), &store).unwrap();
    let r = &run.record;
    assert_eq!(r.model_answer, CASE_STUDY_ANSWER);
    assert_eq!(r.outer_rounds_used, 2);
    assert_eq!(r.inner_steps_used, 3);
    assert_eq!(r.checker_totals, vec![4, 6]);
    assert_eq!(r.reflections, 1);
    assert!(r.accepted_by_checker);
    assert_eq!(r.terminal_reason, TerminalReason::CheckerAccepted);
    let a = r.archive.as_ref().unwrap();
    assert_eq!(a.error_type, ErrorType::None);
    assert_eq!(a.should_evolve, Some(false));
    assert!(a.outcome.added && !a.outcome.evolved);

    let store = store.into_inner().unwrap();
    assert_eq!(store.len(), 1);
    assert_eq!(store.get(&a.note_id).unwrap().content.correct_answer, CASE_STUDY_ANSWER);

    let ctx = &run.context;
    assert_eq!(ctx.count(EntryKind::Reflection), 1);
    assert_eq!(ctx.count(EntryKind::CheckerFeedback), 2);
    assert_eq!(ctx.count(EntryKind::SolverStep), 3);
    assert_eq!(ctx.count(EntryKind::FinalAnswer), 1);
    assert_eq!(import_log(&ctx.log_string()).unwrap(), ctx.entries());
}

#[test]
fn case_study_second_round_sees_reflection_and_filtered_table() {
    let agents = AgentSuite::default();
    let seen = Mutex::new(Vec::new());
    let replay = ReplayBackend::new(case_study_transcript());
    let backend = ScriptedBackend::new(|req: &maple_core::backend::ChatRequest| {
        seen.lock().unwrap().push((req.role, req.user_text.clone()));
        maple_core::backend::ChatBackend::chat(&replay, req)
    });
    let embedder = HashEmbedder::new(64);
    let clock = FixedClock::default();
    let engine = Engine {
        agents: &agents,
        backend: &backend,
        embedder: &embedder,
        clock: &clock,
        config: config(5, 5, RunMode::Inference),
    };
    engine.run_task(&case_study_record().to_task(), &store()).unwrap();
    assert_eq!(backend.calls(AgentRole::ArchiverSum), 0);
    let seen = seen.lock().unwrap().clone();
    let solver: Vec<&String> = seen.iter().filter(|(r, _)| *r == AgentRole::Solver).map(|(_, u)| u).collect();
    assert_eq!(solver.len(), 3);
    assert!(!solver[0].contains("Diagnosis"));
    assert!(solver[1].contains("Improvement plan"));
    // round 2 starts again from the original 10-row table
    assert!(solver[1].contains("Landon Donovan"));
    // the third step sees the five-row intermediate table
    assert!(!solver[2].split("<Question>").next().unwrap().contains("Landon Donovan | 57"));
    assert!(solver[2].contains("Earnie Stewart"));
}

#[test]
fn happy_path_single_step() {
    let agents = AgentSuite::default();
    let backend = ScriptedBackend::new(|req: &maple_core::backend::ChatRequest| {
        Ok(match req.role {
            AgentRole::Solver => solver_response("<NOT CHANGED>", "a"),
            AgentRole::Checker => checker_response([2, 2, 2]),
            _ => unreachable!(),
        })
    });
    let engine = Engine {
        agents: &agents,
        backend: &backend,
        embedder: &HashEmbedder::new(64),
        clock: &FixedClock::default(),
        config: config(5, 5, RunMode::Inference),
    };
    let r = engine.run_task(&small_task("t"), &store()).unwrap().record;
    assert_eq!((r.outer_rounds_used, r.inner_steps_used), (1, 1));
    assert!(r.accepted_by_checker);
    assert_eq!(r.model_answer, "a");
}

#[test]
fn never_ready_exhausts_both_budgets() {
    let agents = AgentSuite::default();
    let backend = ScriptedBackend::new(|_: &maple_core::backend::ChatRequest| Ok(not_ready_response()));
    let engine = Engine {
        agents: &agents,
        backend: &backend,
        embedder: &HashEmbedder::new(64),
        clock: &FixedClock::default(),
        config: config(3, 2, RunMode::Inference),
    };
    let r = engine.run_task(&small_task("t"), &store()).unwrap().record;
    assert_eq!(backend.calls(AgentRole::Solver), 6);
    assert_eq!(backend.calls(AgentRole::Checker), 0);
    assert_eq!(r.terminal_reason, TerminalReason::BudgetExhausted);
    assert_eq!(r.model_answer, UNANSWERED);
    assert_eq!((r.outer_rounds_used, r.inner_steps_used), (2, 6));
}

#[test]
fn rejected_answers_keep_the_last_one() {
    let agents = AgentSuite::default();
    let n = std::sync::atomic::AtomicUsize::new(0);
    let backend = ScriptedBackend::new(|req: &maple_core::backend::ChatRequest| {
        Ok(match req.role {
            AgentRole::Solver => {
                let i = n.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                solver_response("<NOT CHANGED>", &format!("guess {i}"))
            }
            AgentRole::Checker => checker_response([2, 1, 2]),
            AgentRole::Reflector => reflector_response(),
            _ => unreachable!(),
        })
    });
    let engine = Engine {
        agents: &agents,
        backend: &backend,
        embedder: &HashEmbedder::new(64),
        clock: &FixedClock::default(),
        config: config(4, 3, RunMode::Inference),
    };
    let run = engine.run_task(&small_task("t"), &store()).unwrap();
    let r = run.record;
    assert_eq!(r.model_answer, "guess 2");
    assert_eq!(r.checker_totals, vec![5, 5, 5]);
    assert_eq!(r.terminal_reason, TerminalReason::BudgetExhausted);
    assert_eq!(backend.calls(AgentRole::Reflector), 3);
    assert_eq!(run.context.count(EntryKind::Reflection), 3);
}

#[test]
fn parse_failures_consume_steps() {
    let agents = AgentSuite::default();
    let n = std::sync::atomic::AtomicUsize::new(0);
    let backend = ScriptedBackend::new(|req: &maple_core::backend::ChatRequest| {
        Ok(match req.role {
            AgentRole::Solver => {
                if n.fetch_add(1, std::sync::atomic::Ordering::SeqCst) == 0 {
                    "I am not following the format".into()
                } else {
                    solver_response("<NOT CHANGED>", "a")
                }
            }
            AgentRole::Checker => checker_response([2, 2, 2]),
            _ => unreachable!(),
        })
    });
    let engine = Engine {
        agents: &agents,
        backend: &backend,
        embedder: &HashEmbedder::new(64),
        clock: &FixedClock::default(),
        config: config(5, 1, RunMode::Inference),
    };
    let r = engine.run_task(&small_task("t"), &store()).unwrap().record;
    assert_eq!(r.parse_failures, 1);
    assert_eq!(r.inner_steps_used, 2);
    assert!(r.accepted_by_checker);
}

#[test]
fn transport_errors_are_retried_then_fail() {
    let agents = AgentSuite::default();
    let backend = ScriptedBackend::new(|_: &maple_core::backend::ChatRequest| {
        Err(BackendError::Transport("connection refused".into()))
    });
    let engine = Engine {
        agents: &agents,
        backend: &backend,
        embedder: &HashEmbedder::new(64),
        clock: &FixedClock::default(),
        config: config(5, 5, RunMode::Inference),
    };
    let r = engine.run_task(&small_task("t"), &store()).unwrap().record;
    assert_eq!(backend.calls(AgentRole::Solver), 3);
    assert_eq!(r.terminal_reason, TerminalReason::BackendFailure);
    assert!(r.error.as_deref().unwrap().contains("connection refused"));
    assert_eq!(r.model_answer, "");
}

#[test]
fn replay_miss_is_not_retried() {
    let agents = AgentSuite::default();
    let backend = ReplayBackend::new(Default::default());
    let engine = Engine {
        agents: &agents,
        backend: &backend,
        embedder: &HashEmbedder::new(64),
        clock: &FixedClock::default(),
        config: config(5, 5, RunMode::Inference),
    };
    let r = engine.run_task(&small_task("t"), &store()).unwrap().record;
    assert_eq!(r.terminal_reason, TerminalReason::BackendFailure);
}

fn archiving_backend() -> impl Fn(&maple_core::backend::ChatRequest) -> Result<String, BackendError> + Send + Sync {
    |req| {
        Ok(match req.role {
            AgentRole::Solver => solver_response("<NOT CHANGED>", "a"),
            AgentRole::Checker => checker_response([2, 2, 2]),
            AgentRole::ArchiverSum => summary_response(&format!("context for {}", req.task_id), &["t"], "none"),
            AgentRole::ArchiverEvo => no_evolution_response(),
            AgentRole::Reflector => reflector_response(),
        })
    }
}

#[test]
fn dataset_records_come_back_in_order() {
    let agents = AgentSuite::default();
    let backend = ScriptedBackend::new(archiving_backend());
    let engine = Engine {
        agents: &agents,
        backend: &backend,
        embedder: &HashEmbedder::new(64),
        clock: &FixedClock::default(),
        config: config(5, 5, RunMode::MemoryBuilding),
    };
    let tasks: Vec<Task> = ["x", "y", "z"].iter().map(|i| small_task(i)).collect();
    let store = MemoryStore::new(64, RetrievalConfig { k_min: 5, ..Default::default() }).unwrap();
    let (runs, store) = engine.run_dataset(&tasks, store, 1).unwrap();
    let ids: Vec<&str> = runs.iter().map(|r| r.record.task_id.as_str()).collect();
    assert_eq!(ids, ["x", "y", "z"]);
    assert_eq!(store.counters().notes_seen, 3);
    let notes: Vec<String> = runs.iter().map(|r| r.record.archive.as_ref().unwrap().note_id.clone()).collect();
    assert_eq!(notes, ["note-00001", "note-00002", "note-00003"]);

    assert!(engine.run_dataset(&tasks, MemoryStore::new(64, RetrievalConfig::default()).unwrap(), 2).is_err());
    let mut unlabeled = tasks.clone();
    unlabeled[1].ground_truth = None;
    assert!(engine.run_dataset(&unlabeled, MemoryStore::new(64, RetrievalConfig::default()).unwrap(), 1).is_err());
}

#[test]
fn inference_leaves_the_store_alone_and_parallelism_matches() {
    let agents = AgentSuite::default();
    let embedder = HashEmbedder::new(64);
    let clock = FixedClock::default();
    // build a store first
    let builder = ScriptedBackend::new(archiving_backend());
    let build = Engine {
        agents: &agents,
        backend: &builder,
        embedder: &embedder,
        clock: &clock,
        config: config(5, 5, RunMode::MemoryBuilding),
    };
    let tasks: Vec<Task> = (0..12).map(|i| small_task(&format!("t{i}"))).collect();
    let cfg = RetrievalConfig { k_min: 5, delta_solver: 1.0, ..Default::default() };
    let (_, built) = build.run_dataset(&tasks[..4], MemoryStore::new(64, cfg).unwrap(), 1).unwrap();
    assert!(!built.is_empty());

    let backend = ScriptedBackend::new(|req: &maple_core::backend::ChatRequest| {
        Ok(match req.role {
            AgentRole::Solver => solver_response("<NOT CHANGED>", &format!("answer for {}", req.task_id)),
            AgentRole::Checker => checker_response(if req.task_id.ends_with('3') { [2, 2, 1] } else { [2, 2, 2] }),
            AgentRole::Reflector => reflector_response(),
            _ => panic!("inference must not archive"),
        })
    });
    let engine = Engine {
        agents: &agents,
        backend: &backend,
        embedder: &embedder,
        clock: &clock,
        config: config(2, 2, RunMode::Inference),
    };
    let (one, after1) = engine.run_dataset(&tasks, built.clone(), 1).unwrap();
    let (four, after4) = engine.run_dataset(&tasks, built.clone(), 4).unwrap();
    assert_eq!(after1, built);
    assert_eq!(after4, built);
    let recs = |runs: &[maple_core::engine::TaskRun]| runs.iter().map(|r| r.record.clone()).collect::<Vec<_>>();
    assert_eq!(recs(&one), recs(&four));
    let logs = |runs: &[maple_core::engine::TaskRun]| runs.iter().map(|r| r.context.log_string()).collect::<Vec<_>>();
    assert_eq!(logs(&one), logs(&four));
}
