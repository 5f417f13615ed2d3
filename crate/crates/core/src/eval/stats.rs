//! Memory-dynamics statistics and the error-type breakdown.

use serde::{Deserialize, Serialize};

use crate::memory::{ErrorType, MemoryStore, StoreCounters};

/// Column names of the statistics CSV, in order.
pub const STATS_COLUMNS: [&str; 9] = [
    "Threshold",
    "Memory Count",
    "Memory Ratio (%)",
    "Evolution Count",
    "Evolution Ratio (%)",
    "# Evolved Memories",
    "Evolution Efficiency",
    "Med. Strengthen Distance",
    "Med. Update Distance",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryStats {
    pub samples_processed: u64,
    pub memory_count: u64,
    /// memory_count / samples_processed, as a fraction.
    pub memory_ratio: f64,
    pub evolution_count: u64,
    /// evolution_count / memory_count, as a fraction.
    pub evolution_ratio: f64,
    pub evolved_memories: u64,
    /// evolved_memories / evolution_count.
    pub evolution_efficiency: f64,
    /// 0 when no sample was recorded.
    pub median_strengthen_distance: f64,
    pub median_update_distance: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn median(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

impl MemoryStats {
    pub fn from_counts(
        memory_count: u64,
        evolution_count: u64,
        evolved_memories: u64,
        samples_processed: u64,
    ) -> Self {
        MemoryStats {
            samples_processed,
            memory_count,
            memory_ratio: ratio(memory_count, samples_processed),
            evolution_count,
            evolution_ratio: ratio(evolution_count, memory_count),
            evolved_memories,
            evolution_efficiency: ratio(evolved_memories, evolution_count),
            median_strengthen_distance: 0.0,
            median_update_distance: 0.0,
        }
    }

    pub fn from_counters(c: &StoreCounters, samples_processed: u64) -> Self {
        MemoryStats {
            median_strengthen_distance: median(&c.strengthen_distances).unwrap_or(0.0),
            median_update_distance: median(&c.update_distances).unwrap_or(0.0),
            ..Self::from_counts(
                c.notes_added,
                c.evolution_ops,
                c.evolved_memory_ids.len() as u64,
                samples_processed,
            )
        }
    }

    /// One CSV data row; `threshold` fills the first column.
    pub fn csv_row(&self, threshold: f64) -> String {
        format!(
            "{threshold},{},{:.1},{},{:.1},{},{:.2},{:.4},{:.4}",
            self.memory_count,
            self.memory_ratio * 100.0,
            self.evolution_count,
            self.evolution_ratio * 100.0,
            self.evolved_memories,
            self.evolution_efficiency,
            self.median_strengthen_distance,
            self.median_update_distance,
        )
    }

    pub fn csv(&self, threshold: f64) -> String {
        format!("{}\n{}\n", STATS_COLUMNS.join(","), self.csv_row(threshold))
    }
}

/// `samples_processed` is the number of tasks run, which may exceed the
/// number of candidates the store saw.
pub fn compute_memory_stats(store: &MemoryStore, samples_processed: u64) -> MemoryStats {
    MemoryStats::from_counters(store.counters(), samples_processed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorShare {
    pub error_type: ErrorType,
    pub count: u64,
    pub proportion: f64,
}

/// Error counts over notes whose type is not `none`, in reporting order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDistribution {
    pub shares: Vec<ErrorShare>,
}

impl ErrorDistribution {
    pub fn total(&self) -> u64 {
        self.shares.iter().map(|s| s.count).sum()
    }

    pub fn proportion(&self, t: ErrorType) -> f64 {
        self.shares
            .iter()
            .find(|s| s.error_type == t)
            .map_or(0.0, |s| s.proportion)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("error_type,count,proportion\n");
        for s in &self.shares {
            out.push_str(&format!("{},{},{:.4}\n", s.error_type, s.count, s.proportion));
        }
        out
    }
}

pub fn error_distribution_of(types: impl IntoIterator<Item = ErrorType>) -> ErrorDistribution {
    let mut counts = [0u64; ErrorType::ERRORS.len()];
    for t in types {
        if let Some(i) = ErrorType::ERRORS.iter().position(|e| *e == t) {
            counts[i] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    ErrorDistribution {
        shares: ErrorType::ERRORS
            .iter()
            .zip(counts)
            .map(|(&error_type, count)| ErrorShare {
                error_type,
                count,
                proportion: ratio(count, total),
            })
            .collect(),
    }
}

pub fn error_distribution(store: &MemoryStore) -> ErrorDistribution {
    error_distribution_of(store.notes().map(|n| n.content.error_type))
}
