//! Dataset ingestion, answer scoring and memory statistics.

pub mod ingest;
pub mod metrics;
pub mod stats;

pub use ingest::{ingest, DatasetFormat, IngestError, TaskKind, TaskRecord};
pub use metrics::{denotation_match, exact_match};
pub use stats::{compute_memory_stats, error_distribution, ErrorDistribution, MemoryStats};
