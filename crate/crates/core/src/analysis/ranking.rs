use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nncore::EmbeddingRecord;

/// Samples ordered by one class logit, highest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitRanking {
    pub class_index: usize,
    pub entries: Vec<(u64, f32)>,
}

impl LogitRanking {
    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|&(id, _)| id).collect()
    }

    /// Whether the sorted curve changes sign.
    pub fn crosses_zero(&self) -> bool {
        let first = self.entries.first().map(|e| e.1);
        let last = self.entries.last().map(|e| e.1);
        matches!((first, last), (Some(a), Some(b)) if a > 0.0 && b < 0.0)
    }
}

fn check_class(records: &[EmbeddingRecord], class_index: usize) -> Result<()> {
    let first = records.first().ok_or_else(|| Error::Empty("no embedding records".into()))?;
    let n_classes = first.logits.len();
    if class_index >= n_classes {
        return Err(invalid(format!("class index {class_index} out of range for {n_classes} classes")));
    }
    if records.iter().any(|r| r.logits.len() != n_classes) {
        return Err(invalid("records disagree on the number of classes"));
    }
    Ok(())
}

/// Sorts samples by descending logit of `class_index`; ties by ascending id.
pub fn rank_logits(records: &[EmbeddingRecord], class_index: usize) -> Result<LogitRanking> {
    check_class(records, class_index)?;
    let mut entries: Vec<(u64, f32)> = records.iter().map(|r| (r.sample_id, r.logits[class_index])).collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(LogitRanking { class_index, entries })
}

/// The `m` highest-scoring ids (all of them when `m` exceeds the count).
pub fn select_max_window(ranking: &LogitRanking, m: usize) -> Vec<u64> {
    ranking.entries.iter().take(m).map(|&(id, _)| id).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InterceptMode {
    /// Closest to a zero class logit.
    #[default]
    AbsoluteZero,
    /// Closest to a zero margin against the strongest other class.
    MarginZero,
}

/// Distance of a sample from the decision point of `class_index`.
fn intercept_distance(logits: &[f32], class_index: usize, mode: InterceptMode) -> f64 {
    let own = logits[class_index] as f64;
    match mode {
        InterceptMode::AbsoluteZero => own.abs(),
        InterceptMode::MarginZero => {
            let rival = logits
                .iter()
                .enumerate()
                .filter(|&(c, _)| c != class_index)
                .map(|(_, &v)| v as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            (own - rival).abs()
        }
    }
}

/// The `m` ids nearest the intercept of `class_index`, nearest first; ties
/// by ascending id.
pub fn select_intercept_window(records: &[EmbeddingRecord], class_index: usize, m: usize, mode: InterceptMode) -> Result<Vec<u64>> {
    check_class(records, class_index)?;
    let mut keyed: Vec<(f64, u64)> = records
        .iter()
        .map(|r| (intercept_distance(&r.logits, class_index, mode), r.sample_id))
        .collect();
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().take(m).map(|(_, id)| id).collect())
}

/// Per-class intercept windows and their deduplicated union.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterceptSelection {
    pub window: usize,
    pub mode: InterceptMode,
    pub per_class: Vec<Vec<u64>>,
    /// Ascending, no duplicates.
    pub selected: Vec<u64>,
}

pub fn select_intercepts(records: &[EmbeddingRecord], window: usize, mode: InterceptMode) -> Result<InterceptSelection> {
    let n_classes = records.first().ok_or_else(|| Error::Empty("no embedding records".into()))?.logits.len();
    let per_class = (0..n_classes)
        .map(|c| select_intercept_window(records, c, window, mode))
        .collect::<Result<Vec<_>>>()?;
    let selected: BTreeSet<u64> = per_class.iter().flatten().copied().collect();
    Ok(InterceptSelection { window, mode, per_class, selected: selected.into_iter().collect() })
}

/// 5% of the dataset per class, at least 1 and at most 2000.
pub fn default_window_size(n_samples: usize) -> usize {
    ((n_samples as f64 * 0.05).round() as usize).clamp(1, 2000)
}
