use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::ClusterComposition;
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterTag {
    Retrain,
    AcceptableUncertainty,
    Mislabels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriageSource {
    Headless,
    Interactive,
    /// Evaluation-only rule driven by ground-truth groups.
    AutoPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageDecision {
    /// Tag of cluster `c` at index `c`.
    pub tags: Vec<ClusterTag>,
    pub source: TriageSource,
}

impl TriageDecision {
    pub fn retrain_clusters(&self) -> Vec<usize> {
        (0..self.tags.len()).filter(|&c| self.tags[c] == ClusterTag::Retrain).collect()
    }

    pub fn has_retrain(&self) -> bool {
        self.tags.contains(&ClusterTag::Retrain)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagEntry {
    pub cluster: usize,
    pub tag: ClusterTag,
}

/// Per-cluster tags supplied without a UI, e.g. from a JSON file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadlessTriage {
    pub run_id: String,
    pub decisions: Vec<TagEntry>,
}

impl HeadlessTriage {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Checks that each of the `k` clusters is tagged exactly once.
pub fn triage_from_entries(entries: &[TagEntry], k: usize, source: TriageSource) -> Result<TriageDecision> {
    let mut tags: Vec<Option<ClusterTag>> = vec![None; k];
    for e in entries {
        let slot = tags.get_mut(e.cluster).ok_or_else(|| invalid(format!("cluster {} out of range for k = {k}", e.cluster)))?;
        if slot.replace(e.tag).is_some() {
            return Err(invalid(format!("cluster {} tagged more than once", e.cluster)));
        }
    }
    let tags = tags
        .into_iter()
        .enumerate()
        .map(|(c, t)| t.ok_or(Error::MissingTag { cluster: c }))
        .collect::<Result<_>>()?;
    Ok(TriageDecision { tags, source })
}

/// Tags Retrain every cluster whose members are mostly minority-group
/// samples; when there is none, the cluster with the highest minority
/// fraction (lowest index on ties). Everything else is acceptable.
pub fn auto_triage(composition: &[ClusterComposition]) -> Result<TriageDecision> {
    if composition.is_empty() {
        return Err(invalid("no clusters to triage"));
    }
    let mut tags: Vec<ClusterTag> = composition
        .iter()
        .map(|c| if c.size > 0 && c.minority_fraction > 0.5 { ClusterTag::Retrain } else { ClusterTag::AcceptableUncertainty })
        .collect();
    if !tags.contains(&ClusterTag::Retrain) {
        let mut best = 0;
        for (i, c) in composition.iter().enumerate() {
            if c.minority_fraction > composition[best].minority_fraction {
                best = i;
            }
        }
        tags[best] = ClusterTag::Retrain;
    }
    Ok(TriageDecision { tags, source: TriageSource::AutoPolicy })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn comp(fracs: &[f64]) -> Vec<ClusterComposition> {
        fracs
            .iter()
            .enumerate()
            .map(|(c, &f)| ClusterComposition { cluster: c, size: 10, group_counts: vec![], minority_fraction: f })
            .collect()
    }

    #[test]
    fn headless_roundtrip() {
        let json = r#"{"run_id":"r1","decisions":[{"cluster":2,"tag":"Retrain"},{"cluster":0,"tag":"Mislabels"},{"cluster":1,"tag":"AcceptableUncertainty"}]}"#;
        let h: HeadlessTriage = serde_json::from_str(json).unwrap();
        let d = triage_from_entries(&h.decisions, 3, TriageSource::Headless).unwrap();
        assert_eq!(d.retrain_clusters(), vec![2]);
        assert_eq!(d.source, TriageSource::Headless);
    }

    #[test]
    fn missing_and_duplicate_tags_rejected() {
        let e = |cluster, tag| TagEntry { cluster, tag };
        assert!(matches!(
            triage_from_entries(&[e(0, ClusterTag::Retrain)], 2, TriageSource::Headless),
            Err(Error::MissingTag { cluster: 1 })
        ));
        assert!(triage_from_entries(&[e(0, ClusterTag::Retrain), e(0, ClusterTag::Mislabels)], 1, TriageSource::Headless).is_err());
        assert!(triage_from_entries(&[e(3, ClusterTag::Retrain)], 1, TriageSource::Headless).is_err());
        assert!(serde_json::from_str::<HeadlessTriage>(r#"{"run_id":"x","decisions":[],"extra":1}"#).is_err());
    }

    #[test]
    fn auto_policy() {
        assert_eq!(auto_triage(&comp(&[0.1, 0.7, 0.9])).unwrap().retrain_clusters(), vec![1, 2]);
        assert_eq!(auto_triage(&comp(&[0.1, 0.3, 0.3])).unwrap().retrain_clusters(), vec![1]);
        assert!(auto_triage(&[]).is_err());
    }
}
