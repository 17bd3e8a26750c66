use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Group key `(label, spurious attribute)`.
pub type GroupKey = (usize, usize);

/// Per-group sample counts, e.g. of a training set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    counts: BTreeMap<GroupKey, usize>,
}

impl GroupCounts {
    pub fn from_pairs(pairs: impl IntoIterator<Item = GroupKey>) -> Self {
        let mut counts = BTreeMap::new();
        for g in pairs {
            *counts.entry(g).or_insert(0) += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn count(&self, group: GroupKey) -> usize {
        self.counts.get(&group).copied().unwrap_or(0)
    }

    pub fn groups(&self) -> impl Iterator<Item = GroupKey> + '_ {
        self.counts.keys().copied()
    }

    pub fn prevalence(&self, group: GroupKey) -> f64 {
        self.count(group) as f64 / self.total() as f64
    }

    pub fn class_total(&self, label: usize) -> usize {
        self.counts.iter().filter(|(g, _)| g.0 == label).map(|(_, &n)| n).sum()
    }

    /// `P(Y = y | S = s)`.
    pub fn conditional(&self, label: usize, spurious: usize) -> f64 {
        let s_total: usize = self.counts.iter().filter(|(g, _)| g.1 == spurious).map(|(_, &n)| n).sum();
        self.count((label, spurious)) as f64 / s_total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub label: usize,
    pub spurious: usize,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Weight from the training set.
    pub prevalence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetricsReport {
    pub schema_version: u32,
    pub groups: Vec<GroupRow>,
    pub worst_group_accuracy: f64,
    pub weighted_mean_accuracy: f64,
    pub overall_accuracy: f64,
    /// Digest of the configuration that produced the evaluated model.
    pub config_digest: Option<String>,
}

impl GroupMetricsReport {
    /// Deterministic pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Per-group accuracy weighted by training prevalence. Every group in
/// `train_counts` must occur in the evaluation set.
pub fn group_metrics(predictions: &[usize], truth: &[GroupKey], train_counts: &GroupCounts) -> Result<GroupMetricsReport> {
    if predictions.len() != truth.len() {
        return Err(invalid(format!("{} predictions for {} samples", predictions.len(), truth.len())));
    }
    if train_counts.total() == 0 {
        return Err(Error::Empty("training group counts are empty".into()));
    }
    let mut tally: BTreeMap<GroupKey, (usize, usize)> = BTreeMap::new();
    for (&p, &g) in predictions.iter().zip(truth) {
        let e = tally.entry(g).or_insert((0, 0));
        e.0 += 1;
        e.1 += (p == g.0) as usize;
    }
    let mut groups = Vec::new();
    for g in train_counts.groups() {
        let &(n, correct) = tally.get(&g).ok_or_else(|| Error::EmptyGroup { group: format!("(y={}, s={})", g.0, g.1) })?;
        groups.push(GroupRow { label: g.0, spurious: g.1, n, correct, accuracy: correct as f64 / n as f64, prevalence: train_counts.prevalence(g) });
    }
    let worst = groups.iter().map(|r| r.accuracy).fold(f64::INFINITY, f64::min);
    let weighted = groups.iter().map(|r| r.prevalence * r.accuracy).sum();
    let correct: usize = tally.values().map(|t| t.1).sum();
    Ok(GroupMetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        groups,
        worst_group_accuracy: worst,
        weighted_mean_accuracy: weighted,
        overall_accuracy: correct as f64 / truth.len().max(1) as f64,
        config_digest: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTableRow {
    pub label: usize,
    pub spurious: usize,
    pub count: usize,
    pub fraction: f64,
    /// `P(Y = label | S = spurious)`.
    pub conditional: f64,
}

/// Label/group summary of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupManifestSummary {
    pub n_samples: usize,
    pub groups: Vec<GroupTableRow>,
    /// `(label, count)`, ascending label.
    pub class_totals: Vec<(usize, usize)>,
}

impl GroupManifestSummary {
    pub fn from_counts(counts: &GroupCounts) -> Self {
        let groups = counts
            .groups()
            .map(|g| GroupTableRow { label: g.0, spurious: g.1, count: counts.count(g), fraction: counts.prevalence(g), conditional: counts.conditional(g.0, g.1) })
            .collect();
        let labels: std::collections::BTreeSet<usize> = counts.groups().map(|g| g.0).collect();
        Self { n_samples: counts.total(), groups, class_totals: labels.into_iter().map(|l| (l, counts.class_total(l))).collect() }
    }

    pub fn row(&self, label: usize, spurious: usize) -> Option<&GroupTableRow> {
        self.groups.iter().find(|r| r.label == label && r.spurious == spurious)
    }
}

/// Reads `id,y,s` rows (an optional header line is skipped) and returns
/// the counts; malformed rows are reported with their 1-based line.
pub fn read_group_manifest(reader: impl BufRead) -> Result<(Vec<(u64, GroupKey)>, GroupCounts)> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let fields: Vec<&str> = text.split(',').map(str::trim).collect();
        if lineno == 1 && fields.first().is_some_and(|f| f.parse::<u64>().is_err()) {
            continue;
        }
        if fields.len() != 3 {
            return Err(Error::Malformed { line: lineno, reason: format!("expected 3 fields, found {}", fields.len()) });
        }
        let num = |s: &str, what: &str| s.parse::<u64>().map_err(|_| Error::Malformed { line: lineno, reason: format!("{what} {s:?} is not a non-negative integer") });
        rows.push((num(fields[0], "id")?, (num(fields[1], "label")? as usize, num(fields[2], "spurious attribute")? as usize)));
    }
    if rows.is_empty() {
        return Err(Error::Empty("group manifest has no rows".into()));
    }
    let counts = GroupCounts::from_pairs(rows.iter().map(|r| r.1));
    Ok((rows, counts))
}

pub fn ingest_group_manifest(path: &Path) -> Result<GroupManifestSummary> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let (_, counts) = read_group_manifest(file)?;
    Ok(GroupManifestSummary::from_counts(&counts))
}
