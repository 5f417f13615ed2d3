//! Command implementations behind the `maple` binary.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use maple_core::agents::{AgentSuite, PromptTemplates};
use maple_core::backend::{
    load_replay, ChatBackend, Embedder, HashEmbedder, OpenAiChat, OpenAiEmbedder, ReplayBackend,
};
use maple_core::clock::{Clock, FixedClock, SystemClock};
use maple_core::engine::{AnswerRecord, Engine, EngineConfig, RetryPolicy, RunMode, Task, TaskRun};
use maple_core::fixtures;
use maple_core::eval::{self, compute_memory_stats, error_distribution, DatasetFormat, TaskKind, TaskRecord};
use maple_core::memory::{MemoryStore, RetrievalConfig};

use config::{BackendKind, EmbedderKind, Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "maple", version, about = "Multi-agent table reasoning with an evolving memory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a dataset through the engine and write records, logs and a manifest
    Run {
        /// TOML run configuration
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a records file against its dataset
    Eval {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "normalized_jsonl")]
        format: DatasetFormat,
    },
    /// Memory statistics and error distribution of a store
    Stats {
        #[arg(long)]
        store: PathBuf,
        /// Number of tasks processed while building the store
        #[arg(long)]
        samples: u64,
        /// Write stats.csv and errors.csv here instead of stdout
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Replay one task from a transcript and print its record and log
    Replay {
        /// Use the bundled worked example instead of --transcript and --task
        #[arg(long, conflicts_with_all = ["transcript", "task"])]
        case_study: bool,
        #[arg(long, required_unless_present = "case_study")]
        transcript: Option<PathBuf>,
        /// Dataset file holding the task (first record is used unless --task-id)
        #[arg(long, required_unless_present = "case_study")]
        task: Option<PathBuf>,
        #[arg(long)]
        task_id: Option<String>,
        #[arg(long, default_value = "normalized_jsonl")]
        format: DatasetFormat,
        /// Store to start from; updated in place in memory-building mode
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long, value_parser = config::parse_mode, default_value = "memory_building")]
        mode: RunMode,
        #[arg(long, default_value_t = 5)]
        max_inner: u32,
        #[arg(long, default_value_t = 5)]
        max_outer: u32,
    },
}

/// A failed command: bad usage (exit 1) or a runtime failure (exit 2).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

/// Parses `args` (including the program name), runs the command and writes
/// its report to `out`.
pub fn run_cli<I, S>(args: I, out: &mut dyn std::io::Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                write!(out, "{e}").map_err(|e| CliError::Runtime(e.into()))?;
                return Ok(());
            }
            return Err(CliError::Usage(e.to_string()));
        }
    };
    let report = match cli.command {
        Command::Run { config, overrides } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p).map_err(|e| CliError::Usage(format!("{e:#}")))?,
                None => RunConfig::default(),
            };
            cfg.apply(&overrides);
            cfg.validate().map_err(|e| CliError::Usage(format!("{e:#}")))?;
            if cfg.run.dataset.is_none() {
                return Err(CliError::Usage("no dataset given (--dataset or [run].dataset)".into()));
            }
            cmd_run(&cfg)?
        }
        Command::Eval { records, dataset, format } => cmd_eval(&records, &dataset, format)?,
        Command::Stats { store, samples, output } => cmd_stats(&store, samples, output.as_deref())?,
        Command::Replay {
            case_study,
            transcript,
            task,
            task_id,
            format,
            store,
            mode,
            max_inner,
            max_outer,
        } => {
            let source = match (transcript, task) {
                (Some(transcript), Some(task)) if !case_study => ReplaySource::Files { transcript, task },
                _ => ReplaySource::CaseStudy,
            };
            let opts = ReplayOptions {
                source,
                task_id,
                format,
                store,
                mode,
                max_inner,
                max_outer,
            };
            cmd_replay(&opts)?
        }
    };
    out.write_all(report.as_bytes()).map_err(|e| CliError::Runtime(e.into()))?;
    Ok(())
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

fn log_file_name(index: usize, task_id: &str) -> String {
    let safe: String = task_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect();
    format!("{index:05}-{safe}.jsonl")
}

fn records_jsonl(records: &[&AnswerRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

struct Services {
    backend: Box<dyn ChatBackend>,
    embedder: Box<dyn Embedder>,
    clock: Box<dyn Clock>,
    agents: AgentSuite,
}

fn services(cfg: &RunConfig) -> anyhow::Result<Services> {
    let backend: Box<dyn ChatBackend> = match cfg.backend.kind {
        BackendKind::Replay => {
            let path = cfg.backend.transcript.as_ref().expect("validated");
            Box::new(load_replay(path).with_context(|| format!("loading transcript {}", path.display()))?)
        }
        BackendKind::Http => Box::new(OpenAiChat::new(cfg.chat_settings().expect("validated"))),
    };
    let embedder: Box<dyn Embedder> = match cfg.embedder.kind {
        EmbedderKind::Hash => Box::new(HashEmbedder::new(cfg.embedder.dim)),
        EmbedderKind::Http => {
            let settings = cfg
                .embedding_settings()
                .ok_or_else(|| anyhow!("the http embedder needs an endpoint"))?;
            Box::new(OpenAiEmbedder::new(settings, cfg.embedder.dim))
        }
    };
    // Replays are pinned to a fixed clock so their outputs are reproducible.
    let clock: Box<dyn Clock> = match cfg.backend.kind {
        BackendKind::Replay => Box::new(FixedClock::default()),
        BackendKind::Http => Box::new(SystemClock),
    };
    let templates = match &cfg.run.templates {
        Some(dir) => PromptTemplates::with_overrides(dir).with_context(|| format!("reading templates from {}", dir.display()))?,
        None => PromptTemplates::builtin(),
    };
    Ok(Services {
        backend,
        embedder,
        clock,
        agents: AgentSuite::new(templates),
    })
}

fn open_store(path: Option<&Path>, dim: usize, retrieval: RetrievalConfig) -> anyhow::Result<MemoryStore> {
    match path {
        Some(p) if p.exists() => {
            let mut store = MemoryStore::load(p).with_context(|| format!("loading store {}", p.display()))?;
            if store.dim() != dim {
                bail!("store {} has dimension {}, embedder has {dim}", p.display(), store.dim());
            }
            store.set_config(retrieval)?;
            Ok(store)
        }
        _ => Ok(MemoryStore::new(dim, retrieval)?),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a RunConfig,
    engine: EngineConfig,
    dataset_sha256: String,
    dataset_tasks: usize,
    backend: String,
    embedder: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    transcript_sha256: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    store_sha256_before: Option<String>,
}

#[derive(Serialize)]
struct RunSummary {
    tasks: usize,
    accepted_by_checker: usize,
    correct: usize,
    accuracy: f64,
    backend_failures: usize,
    notes_added: usize,
}

/// Runs the configured dataset and writes `records.jsonl`, `logs/`,
/// `summary.json`, `manifest.json` (and `store.jsonl` when building memory).
pub fn cmd_run(cfg: &RunConfig) -> anyhow::Result<String> {
    let dataset = cfg.run.dataset.as_ref().ok_or_else(|| anyhow!("no dataset configured"))?;
    let records = eval::ingest(dataset, cfg.run.format)?;
    let tasks: Vec<Task> = records.iter().map(TaskRecord::to_task).collect();
    let svc = services(cfg)?;
    let store_before = match &cfg.run.store {
        Some(p) if p.exists() => Some(sha256_file(p)?),
        _ => None,
    };
    let store = open_store(cfg.run.store.as_deref(), cfg.embedder.dim, cfg.retrieval)?;
    let engine = Engine {
        agents: &svc.agents,
        backend: svc.backend.as_ref(),
        embedder: svc.embedder.as_ref(),
        clock: svc.clock.as_ref(),
        config: cfg.engine_config(),
    };
    let (runs, store) = engine.run_dataset(&tasks, store, cfg.run.workers)?;

    let out = &cfg.run.output;
    let logs = out.join("logs");
    fs::create_dir_all(&logs).with_context(|| format!("creating {}", logs.display()))?;
    for (i, run) in runs.iter().enumerate() {
        fs::write(logs.join(log_file_name(i, &run.record.task_id)), run.context.log_string())?;
    }
    let recs: Vec<&AnswerRecord> = runs.iter().map(|r| &r.record).collect();
    fs::write(out.join("records.jsonl"), records_jsonl(&recs))?;

    let correct = runs
        .iter()
        .zip(&records)
        .filter(|(run, rec)| rec.is_correct(&run.record.model_answer))
        .count();
    let summary = RunSummary {
        tasks: runs.len(),
        accepted_by_checker: recs.iter().filter(|r| r.accepted_by_checker).count(),
        correct,
        accuracy: if runs.is_empty() { 0.0 } else { correct as f64 / runs.len() as f64 },
        backend_failures: recs
            .iter()
            .filter(|r| r.terminal_reason == maple_core::engine::TerminalReason::BackendFailure)
            .count(),
        notes_added: recs
            .iter()
            .filter(|r| r.archive.as_ref().is_some_and(|a| a.outcome.added))
            .count(),
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;

    if cfg.run.mode == RunMode::MemoryBuilding {
        let path = cfg.run.store.clone().unwrap_or_else(|| out.join("store.jsonl"));
        store.persist(&path).with_context(|| format!("writing store {}", path.display()))?;
    }

    let manifest = Manifest {
        config: cfg,
        engine: cfg.engine_config(),
        dataset_sha256: sha256_file(dataset)?,
        dataset_tasks: records.len(),
        backend: svc.backend.identity(),
        embedder: svc.embedder.identity(),
        transcript_sha256: match (&cfg.backend.kind, &cfg.backend.transcript) {
            (BackendKind::Replay, Some(t)) => Some(sha256_file(t)?),
            _ => None,
        },
        store_sha256_before: store_before,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;

    Ok(format!(
        "tasks: {}\ncorrect: {}\naccuracy: {:.3}\naccepted by checker: {}\nbackend failures: {}\nnotes added: {}\noutput: {}\n",
        summary.tasks,
        summary.correct,
        summary.accuracy,
        summary.accepted_by_checker,
        summary.backend_failures,
        summary.notes_added,
        out.display()
    ))
}

/// Accuracy of a records file: denotation match for QA tasks, exact yes/no
/// match for verification tasks.
pub fn cmd_eval(records_path: &Path, dataset: &Path, format: DatasetFormat) -> anyhow::Result<String> {
    let tasks = eval::ingest(dataset, format)?;
    let text = fs::read_to_string(records_path).with_context(|| format!("reading {}", records_path.display()))?;
    let mut by_id = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: AnswerRecord = serde_json::from_str(line)
            .with_context(|| format!("{} line {}", records_path.display(), i + 1))?;
        by_id.insert(r.task_id.clone(), r);
    }
    let mut report = String::new();
    let mut total = 0usize;
    let mut correct = 0usize;
    let mut per_kind = [(0usize, 0usize); 2];
    for t in &tasks {
        let Some(r) = by_id.get(&t.id) else {
            bail!("no record for task `{}`", t.id);
        };
        let ok = t.is_correct(&r.model_answer);
        total += 1;
        correct += usize::from(ok);
        let k = usize::from(t.task_kind == TaskKind::FactVerification);
        per_kind[k].0 += 1;
        per_kind[k].1 += usize::from(ok);
    }
    if by_id.len() > tasks.len() {
        tracing::warn!("{} records have no matching task", by_id.len() - tasks.len());
    }
    let acc = |c: usize, n: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    writeln!(report, "tasks: {total}")?;
    writeln!(report, "correct: {correct}")?;
    writeln!(report, "accuracy: {:.3}", acc(correct, total))?;
    for (name, (n, c)) in ["qa (denotation)", "fact_verification (exact match)"].iter().zip(per_kind) {
        if n > 0 && n != total {
            writeln!(report, "{name}: {:.3} ({c}/{n})", acc(c, n))?;
        }
    }
    Ok(report)
}

pub fn cmd_stats(store_path: &Path, samples: u64, output: Option<&Path>) -> anyhow::Result<String> {
    let store = MemoryStore::load(store_path).with_context(|| format!("loading store {}", store_path.display()))?;
    let stats = compute_memory_stats(&store, samples).csv(store.config().delta_archiver);
    let errors = error_distribution(&store).csv();
    match output {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("stats.csv"), &stats)?;
            fs::write(dir.join("errors.csv"), &errors)?;
            Ok(format!("wrote {} and {}\n", dir.join("stats.csv").display(), dir.join("errors.csv").display()))
        }
        None => Ok(format!("{stats}\n{errors}")),
    }
}

pub enum ReplaySource {
    CaseStudy,
    Files { transcript: PathBuf, task: PathBuf },
}

pub struct ReplayOptions {
    pub source: ReplaySource,
    pub task_id: Option<String>,
    pub format: DatasetFormat,
    pub store: Option<PathBuf>,
    pub mode: RunMode,
    pub max_inner: u32,
    pub max_outer: u32,
}

/// Replays one task offline and returns the record plus its pool log.
pub fn replay_task(opts: &ReplayOptions) -> anyhow::Result<(TaskRun, MemoryStore)> {
    let (records, backend, origin) = match &opts.source {
        ReplaySource::CaseStudy => (
            vec![fixtures::case_study_record()],
            ReplayBackend::new(fixtures::case_study_transcript()).with_label("case_study"),
            "the bundled case study".to_string(),
        ),
        ReplaySource::Files { transcript, task } => (
            eval::ingest(task, opts.format)?,
            load_replay(transcript).with_context(|| format!("loading transcript {}", transcript.display()))?,
            task.display().to_string(),
        ),
    };
    let record = match &opts.task_id {
        Some(id) => records
            .iter()
            .find(|r| &r.id == id)
            .ok_or_else(|| anyhow!("task `{id}` not found in {origin}"))?,
        None => records.first().ok_or_else(|| anyhow!("{origin} holds no tasks"))?,
    };
    let embedder = HashEmbedder::default();
    let clock = FixedClock::default();
    let agents = AgentSuite::default();
    let store = open_store(opts.store.as_deref(), embedder.dim(), RetrievalConfig::default())?;
    let engine = Engine {
        agents: &agents,
        backend: &backend,
        embedder: &embedder,
        clock: &clock,
        config: EngineConfig {
            max_inner_steps: opts.max_inner,
            max_outer_rounds: opts.max_outer,
            mode: opts.mode,
            retry: RetryPolicy::none(),
        },
    };
    let store = RwLock::new(store);
    let run = engine.run_task(&record.to_task(), &store)?;
    let store = store.into_inner().expect("store lock poisoned");
    if let (RunMode::MemoryBuilding, Some(path)) = (opts.mode, &opts.store) {
        store.persist(path)?;
    }
    Ok((run, store))
}

pub fn cmd_replay(opts: &ReplayOptions) -> anyhow::Result<String> {
    let (run, _) = replay_task(opts)?;
    let r = &run.record;
    let mut out = String::new();
    writeln!(out, "final answer: {}", r.model_answer)?;
    writeln!(out, "terminal reason: {}", serde_json::to_value(r.terminal_reason)?.as_str().unwrap_or_default())?;
    writeln!(out, "outer rounds: {}", r.outer_rounds_used)?;
    writeln!(out, "checker totals: {:?}", r.checker_totals)?;
    writeln!(out, "\n# record")?;
    writeln!(out, "{}", serde_json::to_string_pretty(r)?)?;
    writeln!(out, "\n# pool log")?;
    out.push_str(&run.context.log_string());
    Ok(out)
}
