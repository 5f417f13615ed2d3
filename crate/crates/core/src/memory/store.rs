//! The long-term note store: threshold retrieval, density-filtered insertion
//! and evolution.
//!
//! Retrieval is a brute-force scan. A note qualifies when its cosine distance
//! to the query is at most the mode's threshold; qualifying notes are ordered
//! by distance, then id, and cut to `k`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::note::{MemoryNote, NoteContent};
use crate::agents::{EvolutionAction, EvolutionDecision};
use crate::backend::{BackendError, Embedder, EmbeddingVector};
use crate::clock::Clock;
use crate::table::Table;

pub const STORE_FORMAT: &str = "maple-memory-store";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store io: {0}")]
    Io(#[from] std::io::Error),
    #[error("store file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("invalid retrieval config: {0}")]
    Config(String),
    #[error("embedding has {actual} dimensions, store expects {expected}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("note `{0}` is already in the store")]
    DuplicateId(String),
    #[error("unknown note id `{0}`")]
    UnknownNote(String),
    #[error(transparent)]
    Embedding(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Neighbor limit.
    pub k: usize,
    /// Required minimum neighbors: a candidate with at least this many
    /// archiver-time neighbors is not stored.
    pub k_min: usize,
    pub delta_solver: f64,
    pub delta_archiver: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 5,
            k_min: 2,
            delta_solver: 0.3,
            delta_archiver: 0.7,
        }
    }
}

impl RetrievalConfig {
    /// Defaults tuned for yes/no fact verification.
    pub fn fact_verification() -> Self {
        RetrievalConfig {
            delta_solver: 0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.k == 0 {
            return Err(StoreError::Config("k must be positive".into()));
        }
        if self.k_min > self.k {
            return Err(StoreError::Config(format!(
                "k_min ({}) exceeds k ({})",
                self.k_min, self.k
            )));
        }
        for (name, d) in [
            ("delta_solver", self.delta_solver),
            ("delta_archiver", self.delta_archiver),
        ] {
            if !(0.0..=1.0).contains(&d) {
                return Err(StoreError::Config(format!("{name} must be in [0, 1], got {d}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    SolverTime,
    ArchiverTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub note_id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
    pub query_kind: QueryKind,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.note_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrationOutcome {
    pub added: bool,
    pub evolved: bool,
    pub links_added: usize,
    pub neighbors_updated: usize,
    /// Ids named by the decision that could not be applied.
    pub skipped: Vec<String>,
}

/// Lifetime event counters, the raw material for memory statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreCounters {
    /// Candidates offered to `integrate`.
    pub notes_seen: u64,
    pub notes_added: u64,
    /// Integrations in which at least one evolution action took effect.
    pub evolution_ops: u64,
    /// One entry per existing note touched by an evolution operation.
    pub evolved_memory_ids: Vec<String>,
    /// Distance from the new note to each note it was linked to.
    pub strengthen_distances: Vec<f64>,
    /// Distance from the new note to each neighbor it rewrote.
    pub update_distances: Vec<f64>,
}

/// Query text for solver-time retrieval: the table header plus the question.
pub fn solver_query_text(table: &Table, question: &str) -> String {
    format!("{}\n{}", table.header_markdown(), question)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryStore {
    dim: usize,
    config: RetrievalConfig,
    notes: BTreeMap<String, MemoryNote>,
    counters: StoreCounters,
}

impl MemoryStore {
    pub fn new(dim: usize, config: RetrievalConfig) -> Result<Self, StoreError> {
        config.validate()?;
        if dim == 0 {
            return Err(StoreError::Config("embedding dimension must be positive".into()));
        }
        Ok(MemoryStore {
            dim,
            config,
            notes: BTreeMap::new(),
            counters: StoreCounters::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: RetrievalConfig) -> Result<(), StoreError> {
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn counters(&self) -> &StoreCounters {
        &self.counters
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&MemoryNote> {
        self.notes.get(id)
    }

    /// Notes in id order.
    pub fn notes(&self) -> impl Iterator<Item = &MemoryNote> {
        self.notes.values()
    }

    /// All link edges `(from, to)` in id order.
    pub fn edges(&self) -> Vec<(&str, &str)> {
        self.notes
            .values()
            .flat_map(|n| n.links.iter().map(move |to| (n.id.as_str(), to.as_str())))
            .collect()
    }

    fn check_dim(&self, v: &EmbeddingVector) -> Result<(), StoreError> {
        if v.dim() != self.dim {
            return Err(StoreError::DimMismatch {
                expected: self.dim,
                actual: v.dim(),
            });
        }
        Ok(())
    }

    /// The id the next candidate will receive.
    pub fn next_id(&self) -> String {
        format!("note-{:05}", self.counters.notes_seen + 1)
    }

    /// Embeds `content` and wraps it as the next candidate note.
    pub fn prepare_note(
        &self,
        content: NoteContent,
        embedder: &dyn Embedder,
        clock: &dyn Clock,
    ) -> Result<MemoryNote, StoreError> {
        let embedding = embedder.embed(&content.embedding_text())?;
        self.check_dim(&embedding)?;
        let now = clock.now();
        Ok(MemoryNote {
            id: self.next_id(),
            content,
            links: Vec::new(),
            embedding,
            created_at: now,
            updated_at: now,
        })
    }

    /// Threshold scan against `query`, skipping `exclude`.
    pub fn retrieve(
        &self,
        query: &EmbeddingVector,
        kind: QueryKind,
        exclude: Option<&str>,
    ) -> Result<RetrievalResult, StoreError> {
        self.check_dim(query)?;
        let delta = match kind {
            QueryKind::SolverTime => self.config.delta_solver,
            QueryKind::ArchiverTime => self.config.delta_archiver,
        };
        let mut hits: Vec<Hit> = self
            .notes
            .values()
            .filter(|n| Some(n.id.as_str()) != exclude)
            .map(|n| Hit {
                note_id: n.id.clone(),
                distance: query.cosine_distance(&n.embedding),
            })
            .filter(|h| h.distance <= delta)
            .collect();
        hits.sort_by(|a, b| {
            a.distance
                .total_cmp(&b.distance)
                .then_with(|| a.note_id.cmp(&b.note_id))
        });
        hits.truncate(self.config.k);
        Ok(RetrievalResult {
            hits,
            query_kind: kind,
        })
    }

    pub fn retrieve_solver(
        &self,
        table: &Table,
        question: &str,
        embedder: &dyn Embedder,
    ) -> Result<RetrievalResult, StoreError> {
        if self.notes.is_empty() {
            return Ok(RetrievalResult {
                hits: Vec::new(),
                query_kind: QueryKind::SolverTime,
            });
        }
        let query = embedder.embed(&solver_query_text(table, question))?;
        self.retrieve(&query, QueryKind::SolverTime, None)
    }

    pub fn retrieve_archiver(&self, note: &MemoryNote) -> Result<RetrievalResult, StoreError> {
        self.retrieve(&note.embedding, QueryKind::ArchiverTime, Some(&note.id))
    }

    pub fn hit_notes(&self, result: &RetrievalResult) -> Vec<MemoryNote> {
        result
            .hits
            .iter()
            .filter_map(|h| self.notes.get(&h.note_id).cloned())
            .collect()
    }

    /// Offers a candidate note to the store.
    ///
    /// Candidates with `k_min` or more archiver-time neighbors are dropped.
    /// Otherwise `decide` sees the candidate and its neighbors, its decision
    /// is applied, and the candidate is inserted. Ids the decision names that
    /// cannot be applied are skipped and reported in the outcome.
    pub fn integrate<F>(
        &mut self,
        mut note: MemoryNote,
        embedder: &dyn Embedder,
        clock: &dyn Clock,
        decide: F,
    ) -> Result<IntegrationOutcome, StoreError>
    where
        F: FnOnce(&MemoryNote, &[MemoryNote]) -> EvolutionDecision,
    {
        self.check_dim(&note.embedding)?;
        if self.notes.contains_key(&note.id) {
            return Err(StoreError::DuplicateId(note.id));
        }
        let neighbors = self.retrieve_archiver(&note)?;
        self.counters.notes_seen += 1;
        let mut outcome = IntegrationOutcome::default();
        if neighbors.hits.len() >= self.config.k_min {
            return Ok(outcome);
        }

        let decision = decide(&note, &self.hit_notes(&neighbors));
        let decision = match decision.validate() {
            Ok(()) => decision,
            Err(e) => {
                tracing::warn!(note = %note.id, "ignoring evolution decision: {e}");
                EvolutionDecision::no_evolution()
            }
        };

        // Evaluate the whole decision before touching the store so a failure
        // part-way through leaves it unchanged.
        let mut touched: BTreeSet<String> = BTreeSet::new();
        let mut strengthen_d = Vec::new();
        let mut update_d = Vec::new();
        let mut rewrites: Vec<MemoryNote> = Vec::new();

        if decision.has(EvolutionAction::Strengthen) {
            for target in &decision.suggested_connections {
                let target = target.trim();
                let Some(other) = self.notes.get(target) else {
                    tracing::warn!(note = %note.id, "strengthen names unknown note `{target}`");
                    outcome.skipped.push(target.to_string());
                    continue;
                };
                if note.links.iter().any(|l| l == target) {
                    continue;
                }
                note.links.push(target.to_string());
                strengthen_d.push(note.embedding.cosine_distance(&other.embedding));
                touched.insert(target.to_string());
                outcome.links_added += 1;
            }
        }

        if decision.has(EvolutionAction::UpdateNeighbor) {
            let n = decision
                .new_context_neighborhood
                .len()
                .max(decision.new_tags_neighborhood.len());
            for i in 0..n {
                let Some(hit) = neighbors.hits.get(i) else {
                    tracing::warn!(note = %note.id, "neighbor update {} has no matching neighbor", i + 1);
                    outcome.skipped.push(format!("neighbor#{}", i + 1));
                    continue;
                };
                let mut neighbor = self.notes[&hit.note_id].clone();
                let mut changed = false;
                if let Some(ctx) = decision.new_context_neighborhood.get(i) {
                    let ctx = ctx.trim();
                    if !ctx.is_empty() && ctx != neighbor.content.context {
                        neighbor.content.context = ctx.to_string();
                        changed = true;
                    }
                }
                if let Some(tags) = decision.new_tags_neighborhood.get(i) {
                    if !tags.is_empty() && *tags != neighbor.content.tags {
                        neighbor.content.tags = tags.clone();
                        changed = true;
                    }
                }
                if !changed {
                    continue;
                }
                let embedding = embedder.embed(&neighbor.content.embedding_text())?;
                self.check_dim(&embedding)?;
                neighbor.embedding = embedding;
                neighbor.updated_at = clock.now();
                update_d.push(hit.distance);
                touched.insert(neighbor.id.clone());
                rewrites.push(neighbor);
                outcome.neighbors_updated += 1;
            }
        }

        if decision.should_evolve && !decision.tags_to_update.is_empty() {
            note.content.tags = decision.tags_to_update.clone();
            let embedding = embedder.embed(&note.content.embedding_text())?;
            self.check_dim(&embedding)?;
            note.embedding = embedding;
        }

        outcome.evolved = outcome.links_added + outcome.neighbors_updated > 0;
        if outcome.evolved {
            self.counters.evolution_ops += 1;
            self.counters.evolved_memory_ids.extend(touched);
            self.counters.strengthen_distances.extend(strengthen_d);
            self.counters.update_distances.extend(update_d);
        }
        for n in rewrites {
            self.notes.insert(n.id.clone(), n);
        }
        self.notes.insert(note.id.clone(), note);
        self.counters.notes_added += 1;
        outcome.added = true;
        Ok(outcome)
    }

    /// Inserts a note without filtering or evolution, e.g. to seed a store.
    pub fn insert_unchecked(&mut self, note: MemoryNote) -> Result<(), StoreError> {
        self.check_dim(&note.embedding)?;
        if self.notes.contains_key(&note.id) {
            return Err(StoreError::DuplicateId(note.id));
        }
        for l in &note.links {
            if !self.notes.contains_key(l) {
                return Err(StoreError::UnknownNote(l.clone()));
            }
        }
        self.notes.insert(note.id.clone(), note);
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut lines = Vec::with_capacity(self.notes.len() + 2);
        let header = Record::Header(Header {
            format: STORE_FORMAT.into(),
            version: STORE_VERSION,
            dim: self.dim,
            config: self.config,
        });
        lines.push(header);
        lines.extend(self.notes.values().cloned().map(Record::Note));
        for (from, to) in self.edges() {
            lines.push(Record::Edge {
                from: from.to_string(),
                to: to.to_string(),
            });
        }
        lines.push(Record::Counters(self.counters.clone()));
        let mut out = String::new();
        for r in &lines {
            out.push_str(&serde_json::to_string(r).expect("store records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, StoreError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str::<Record>(l).map_err(|e| StoreError::Format {
                    line: i + 1,
                    message: e.to_string(),
                }).map(|r| (i + 1, r))
            });

        let header = match lines.next() {
            Some(Ok((_, Record::Header(h)))) => h,
            Some(Ok((line, _))) => {
                return Err(StoreError::Format {
                    line,
                    message: "expected the store header first".into(),
                })
            }
            Some(Err(StoreError::Format { line, message })) => {
                return Err(StoreError::Format {
                    line,
                    message: format!("bad header: {message}"),
                })
            }
            Some(Err(e)) => return Err(e),
            None => {
                return Err(StoreError::Format {
                    line: 1,
                    message: "empty store file".into(),
                })
            }
        };
        if header.format != STORE_FORMAT || header.version != STORE_VERSION {
            return Err(StoreError::Format {
                line: 1,
                message: format!(
                    "unsupported store format {} v{} (expected {STORE_FORMAT} v{STORE_VERSION})",
                    header.format, header.version
                ),
            });
        }
        let mut store = MemoryStore::new(header.dim, header.config).map_err(|e| StoreError::Format {
            line: 1,
            message: e.to_string(),
        })?;
        let mut counters = None;
        for item in lines {
            let (line, record) = item?;
            let fail = |message: String| StoreError::Format { line, message };
            match record {
                Record::Header(_) => return Err(fail("duplicate header".into())),
                Record::Note(n) => {
                    if n.embedding.dim() != store.dim {
                        return Err(fail(format!(
                            "note `{}` has dimension {}, store has {}",
                            n.id,
                            n.embedding.dim(),
                            store.dim
                        )));
                    }
                    if store.notes.insert(n.id.clone(), n).is_some() {
                        return Err(fail("duplicate note id".into()));
                    }
                }
                Record::Edge { from, to } => {
                    if !store.notes.contains_key(&to) {
                        return Err(fail(format!("edge points at unknown note `{to}`")));
                    }
                    let Some(n) = store.notes.get_mut(&from) else {
                        return Err(fail(format!("edge starts at unknown note `{from}`")));
                    };
                    n.links.push(to);
                }
                Record::Counters(c) => {
                    if counters.replace(c).is_some() {
                        return Err(fail("duplicate counters".into()));
                    }
                }
            }
        }
        store.counters = counters.ok_or_else(|| StoreError::Format {
            line: text.lines().count(),
            message: "missing counters record".into(),
        })?;
        Ok(store)
    }

    /// Writes the store to `path`, replacing it atomically.
    pub fn persist(&self, path: &Path) -> Result<(), StoreError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(self.to_jsonl().as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dim: usize,
    config: RetrievalConfig,
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Record {
    Header(Header),
    Note(MemoryNote),
    Edge { from: String, to: String },
    Counters(StoreCounters),
}
