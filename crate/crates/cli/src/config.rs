//! Run configuration: a TOML document, then command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use maple_core::backend::{HttpSettings, DEFAULT_EMBEDDING_DIM};
use maple_core::engine::{EngineConfig, RetryPolicy, RunMode};
use maple_core::eval::DatasetFormat;
use maple_core::memory::RetrievalConfig;
use maple_core::pool::Budget;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Replay,
    Http,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub transcript: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub timeout_secs: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Hash,
    Http,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSection {
    pub kind: EmbedderKind,
    pub dim: usize,
    pub endpoint: Option<String>,
    pub model: Option<String>,
}

impl Default for EmbedderSection {
    fn default() -> Self {
        EmbedderSection {
            kind: EmbedderKind::Hash,
            dim: DEFAULT_EMBEDDING_DIM,
            endpoint: None,
            model: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    pub max_inner_steps: u32,
    pub max_outer_rounds: u32,
}

impl Default for BudgetSection {
    fn default() -> Self {
        let b = Budget::default();
        BudgetSection {
            max_inner_steps: b.max_inner_steps,
            max_outer_rounds: b.max_outer_rounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub mode: RunMode,
    pub dataset: Option<PathBuf>,
    pub format: DatasetFormat,
    pub store: Option<PathBuf>,
    pub output: PathBuf,
    pub workers: usize,
    /// Directory of prompt template overrides.
    pub templates: Option<PathBuf>,
    pub retry_attempts: u32,
    pub retry_backoff_ms: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        let retry = RetryPolicy::default();
        RunSection {
            mode: RunMode::Inference,
            dataset: None,
            format: DatasetFormat::NormalizedJsonl,
            store: None,
            output: PathBuf::from("maple-run"),
            workers: 1,
            templates: None,
            retry_attempts: retry.max_attempts,
            retry_backoff_ms: retry.initial_backoff_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendSection,
    pub embedder: EmbedderSection,
    pub retrieval: RetrievalConfig,
    pub budget: BudgetSection,
    pub run: RunSection,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Chat backend: replay or http
    #[arg(long, value_parser = parse_backend)]
    pub backend: Option<BackendKind>,
    /// Transcript for the replay backend
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Embedder: hash or http
    #[arg(long, value_parser = parse_embedder)]
    pub embedder: Option<EmbedderKind>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub k_min: Option<usize>,
    #[arg(long)]
    pub delta_solver: Option<f64>,
    #[arg(long)]
    pub delta_archiver: Option<f64>,
    #[arg(long)]
    pub max_inner: Option<u32>,
    #[arg(long)]
    pub max_outer: Option<u32>,
    /// memory_building or inference
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<RunMode>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// normalized_jsonl, wikitq_tsv or tabfact_json
    #[arg(long)]
    pub format: Option<DatasetFormat>,
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

fn parse_backend(s: &str) -> Result<BackendKind, String> {
    match s {
        "replay" => Ok(BackendKind::Replay),
        "http" => Ok(BackendKind::Http),
        _ => Err(format!("unknown backend `{s}` (expected replay or http)")),
    }
}

fn parse_embedder(s: &str) -> Result<EmbedderKind, String> {
    match s {
        "hash" => Ok(EmbedderKind::Hash),
        "http" => Ok(EmbedderKind::Http),
        _ => Err(format!("unknown embedder `{s}` (expected hash or http)")),
    }
}

pub fn parse_mode(s: &str) -> Result<RunMode, String> {
    match s {
        "memory_building" => Ok(RunMode::MemoryBuilding),
        "inference" => Ok(RunMode::Inference),
        _ => Err(format!("unknown mode `{s}` (expected memory_building or inference)")),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        // relative paths in the file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut cfg.backend.transcript);
        fix(&mut cfg.run.dataset);
        fix(&mut cfg.run.store);
        fix(&mut cfg.run.templates);
        if cfg.run.output.is_relative() {
            cfg.run.output = base.join(&cfg.run.output);
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
            ($src:expr => some $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = Some(v);
                }
            };
        }
        set!(o.backend => self.backend.kind);
        set!(o.transcript => some self.backend.transcript);
        set!(o.endpoint => some self.backend.endpoint);
        set!(o.model => some self.backend.model);
        set!(o.embedder => self.embedder.kind);
        set!(o.dim => self.embedder.dim);
        set!(o.k => self.retrieval.k);
        set!(o.k_min => self.retrieval.k_min);
        set!(o.delta_solver => self.retrieval.delta_solver);
        set!(o.delta_archiver => self.retrieval.delta_archiver);
        set!(o.max_inner => self.budget.max_inner_steps);
        set!(o.max_outer => self.budget.max_outer_rounds);
        set!(o.mode => self.run.mode);
        set!(o.dataset => some self.run.dataset);
        set!(o.format => self.run.format);
        set!(o.store => some self.run.store);
        set!(o.output => self.run.output);
        set!(o.workers => self.run.workers);
        set!(o.templates => some self.run.templates);
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.retrieval.validate()?;
        Budget::new(self.budget.max_inner_steps, self.budget.max_outer_rounds).map_err(anyhow::Error::msg)?;
        if self.run.workers == 0 {
            bail!("workers must be at least 1");
        }
        if self.run.mode == RunMode::MemoryBuilding && self.run.workers > 1 {
            bail!("memory building must run with a single worker");
        }
        if self.run.retry_attempts == 0 {
            bail!("retry_attempts must be at least 1");
        }
        if self.embedder.dim == 0 {
            bail!("embedding dimension must be positive");
        }
        match self.backend.kind {
            BackendKind::Replay if self.backend.transcript.is_none() => {
                bail!("the replay backend needs a transcript")
            }
            BackendKind::Http if self.backend.endpoint.is_none() || self.backend.model.is_none() => {
                bail!("the http backend needs an endpoint and a model")
            }
            _ => {}
        }
        if self.embedder.kind == EmbedderKind::Http && self.embedder.model.is_none() {
            bail!("the http embedder needs a model");
        }
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            max_inner_steps: self.budget.max_inner_steps,
            max_outer_rounds: self.budget.max_outer_rounds,
            mode: self.run.mode,
            retry: RetryPolicy {
                max_attempts: self.run.retry_attempts,
                initial_backoff_ms: self.run.retry_backoff_ms,
            },
        }
    }

    pub fn chat_settings(&self) -> Option<HttpSettings> {
        Some(HttpSettings {
            endpoint: self.backend.endpoint.clone()?,
            model: self.backend.model.clone()?,
            timeout_secs: self.backend.timeout_secs.unwrap_or(120),
        })
    }

    /// Embedding endpoint, falling back to the chat endpoint.
    pub fn embedding_settings(&self) -> Option<HttpSettings> {
        Some(HttpSettings {
            endpoint: self.embedder.endpoint.clone().or_else(|| self.backend.endpoint.clone())?,
            model: self.embedder.model.clone()?,
            timeout_secs: self.backend.timeout_secs.unwrap_or(120),
        })
    }
}
