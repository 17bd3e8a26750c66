use std::collections::{BTreeMap, HashMap};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use mid_core::analysis::{
    default_window_size, rank_logits, select_intercepts, select_max_window, sweep_k, ClusterComposition, GroupAnnotations,
    InterceptSelection, KMeansConfig,
};
use mid_core::midt::{Bundle, Tensor};
use mid_core::mitigation::{
    assemble_retrain_set, auto_triage, dispute_labels, group_metrics, retrain_last_layer, triage_from_entries, AlwaysAgree,
    DisputeOracle, DisputeOutcome, ExternalVqaClient, GroundTruthOracle, GroupCounts, GroupKey, GroupMetricsReport,
    HeadlessTriage, RetrainOutcome, RetrainSplit, TriageDecision, TriageSource,
};
use mid_core::nncore::{
    embeddings_bundle, evaluate, extract_embeddings, predict, records_from_bundle, train_erm_with, Checkpoint, EmbeddingRecord, EpochLog,
    TrainConfig,
};
use mid_core::synthgen::{inject_label_flips, sample_unfair, BiasConfig, Dataset};
use serde::{Deserialize, Serialize};

use crate::config::{parse_run_id, ExperimentConfig, OracleConfig, TriagePolicy};
use crate::digest::digest_json;
use crate::store::{upstream, RunManifest, RunStore, StageRecord, StageState};

pub const SELECTION_FILE: &str = "selection.json";
pub const SELECTION_SOURCE_FILE: &str = "selection.source";

/// Manual triage is required before the run can continue.
#[derive(Debug)]
pub struct AwaitingTriage {
    pub run_id: String,
}

impl std::fmt::Display for AwaitingTriage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run {} is waiting for a cluster selection ({SELECTION_FILE})", self.run_id)
    }
}

impl std::error::Error for AwaitingTriage {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErmEval {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_per_class: Vec<Option<f64>>,
    pub epoch_log: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowArtifact {
    pub window: usize,
    pub intercept: InterceptSelection,
    /// Top-`window` ids of each class logit.
    pub max_windows: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdCluster {
    pub id: u64,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub k: usize,
    pub inertia: f64,
    pub sizes: Vec<usize>,
    pub composition: Option<Vec<ClusterComposition>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterArtifact {
    pub k: usize,
    pub seed: u64,
    pub assignments: Vec<IdCluster>,
    pub centroids_file: String,
    pub composition: Option<Vec<ClusterComposition>>,
    pub sweep: Vec<SweepSummary>,
}

impl ClusterArtifact {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for a in &self.assignments {
            sizes[a.cluster] += 1;
        }
        sizes
    }

    pub fn members(&self, cluster: usize) -> Vec<u64> {
        self.assignments.iter().filter(|a| a.cluster == cluster).map(|a| a.id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainArtifact {
    pub retrain_clusters: Vec<usize>,
    pub n_retrain_ids: usize,
    pub split: RetrainSplit,
    pub outcome: RetrainOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MidSummary {
    pub run_id: String,
    pub intercept_size: usize,
    pub disputed: usize,
    pub kept: usize,
    /// Share of the ERM model's training errors that fall in the intercept set.
    pub erm_errors_in_intercept: f64,
    pub lambda: f64,
    pub before_wga: f64,
    pub after_wga: f64,
    pub before_weighted_mean: f64,
    pub after_weighted_mean: f64,
}

/// Artifact names written by each stage.
pub mod files {
    pub const TRAIN_DATA: &str = "train.jsonl";
    pub const TEST_DATA: &str = "test.jsonl";
    pub const FLIPS: &str = "flips.json";
    pub const MODEL: &str = "model.midt";
    pub const MODEL_SIDECAR: &str = "model.midt.json";
    pub const ERM_EVAL: &str = "erm_eval.json";
    pub const EMBEDDINGS: &str = "embeddings.midt";
    pub const INTERCEPT: &str = "intercept.json";
    pub const DISPUTE: &str = "dispute.json";
    pub const CLUSTERS: &str = "clusters.json";
    pub const CENTROIDS: &str = "centroids.midt";
    pub const TRIAGE: &str = "triage.json";
    pub const RETRAINED: &str = "retrained.midt";
    pub const RETRAINED_SIDECAR: &str = "retrained.midt.json";
    pub const RETRAIN: &str = "retrain.json";
    pub const REPORT_BEFORE: &str = "report_before.json";
    pub const REPORT_AFTER: &str = "report_after.json";
    pub const SUMMARY: &str = "mid_summary.json";
}

/// Collects the artifacts a stage writes.
pub struct StageOutput<'a> {
    store: &'a RunStore,
    run_id: String,
    artifacts: BTreeMap<String, String>,
}

impl StageOutput<'_> {
    pub fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let d = self.store.write_artifact(&self.run_id, name, bytes)?;
        self.artifacts.insert(name.into(), d);
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let d = self.store.write_json(&self.run_id, name, value)?;
        self.artifacts.insert(name.into(), d);
        Ok(())
    }

    /// Records a file some other writer already put in the run directory.
    pub fn existing(&mut self, name: &str) -> Result<()> {
        let d = self.store.file_digest(&self.run_id, name)?;
        self.artifacts.insert(name.into(), d);
        Ok(())
    }

    pub fn path(&self, name: &str) -> std::path::PathBuf {
        self.store.artifact_path(&self.run_id, name)
    }
}

/// Runs stages of one experiment against a store.
pub struct Pipeline<'a> {
    pub store: &'a RunStore,
    pub cfg: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct StageInput<'a, C: Serialize> {
    stage: &'a str,
    config: C,
    upstream: Option<&'a StageRecord>,
}

impl<'a> Pipeline<'a> {
    pub fn new(store: &'a RunStore, cfg: &'a ExperimentConfig) -> Self {
        Self { store, cfg }
    }

    fn manifest(&self, run_id: &str) -> Result<RunManifest> {
        let mut m = self.store.load_or_create(run_id)?;
        if let Some((b, s)) = parse_run_id(run_id) {
            m.bias = Some(b);
            m.seed = Some(s);
        }
        Ok(m)
    }

    /// Executes `body` unless the stage is already current. Returns whether
    /// it ran.
    fn run_stage<C: Serialize>(
        &self,
        run_id: &str,
        stage: &str,
        config: C,
        body: impl FnOnce(&RunManifest, &mut StageOutput<'_>) -> Result<()>,
    ) -> Result<bool> {
        let mut manifest = self.manifest(run_id)?;
        let up = match upstream(stage) {
            Some(u) => {
                if !manifest.is_done(u) {
                    bail!("run {run_id}: stage {stage} needs {u} to be done first");
                }
                manifest.stages.get(u)
            }
            None => None,
        };
        let input_digest = digest_json(&StageInput { stage, config, upstream: up });
        if self.store.stage_current(&manifest, stage, &input_digest) {
            info!("{run_id}: {stage} up to date");
            return Ok(false);
        }
        info!("{run_id}: running {stage}");
        let mut out = StageOutput { store: self.store, run_id: run_id.into(), artifacts: BTreeMap::new() };
        let result = body(&manifest, &mut out);
        manifest.config = Some(serde_json::to_value(self.cfg)?);
        let record = match &result {
            Ok(()) => StageRecord { state: StageState::Done, input_digest, artifacts: out.artifacts, error: None },
            Err(e) => StageRecord { state: StageState::Failed, input_digest, artifacts: out.artifacts, error: Some(format!("{e:#}")) },
        };
        manifest.stages.insert(stage.into(), record);
        self.store.save_manifest(&manifest)?;
        result.with_context(|| format!("run {run_id}: stage {stage} failed"))?;
        Ok(true)
    }

    fn bias_seed(&self, run_id: &str) -> Result<(f64, u64)> {
        parse_run_id(run_id).ok_or_else(|| anyhow!("run {run_id} is not a synthetic (bias, seed) run"))
    }

    pub fn train_config_for(&self, seed: u64) -> TrainConfig {
        TrainConfig { rng_seed: seed, ..self.cfg.train.clone() }
    }

    pub fn stage_data(&self, run_id: &str) -> Result<bool> {
        let (bias, seed) = self.bias_seed(run_id)?;
        let d = &self.cfg.data;
        let key = (d.n_train, d.n_test, d.test_seed, d.label_noise, bias, seed);
        self.run_stage(run_id, "data", key, |_, out| {
            let mut train = sample_unfair(&BiasConfig { bias, n_samples: d.n_train, rng_seed: seed })?;
            let flips = if d.label_noise > 0.0 { inject_label_flips(&mut train, d.label_noise, seed ^ 0xF11F)? } else { Vec::new() };
            let test = sample_unfair(&BiasConfig { bias: 0.0, n_samples: d.n_test, rng_seed: d.test_seed })?;
            out.bytes(files::TRAIN_DATA, train.manifest_jsonl()?.as_bytes())?;
            out.bytes(files::TEST_DATA, test.manifest_jsonl()?.as_bytes())?;
            out.json(files::FLIPS, &flips)
        })
    }

    pub fn load_dataset(&self, manifest: &RunManifest, name: &str) -> Result<Dataset> {
        let bytes = self.store.read_verified(manifest, "data", name)?;
        let text = String::from_utf8(bytes).context("dataset manifest is not UTF-8")?;
        Ok(Dataset::from_manifest(&Dataset::parse_manifest(&text)?)?)
    }

    pub fn stage_train(&self, run_id: &str) -> Result<bool> {
        let (_, seed) = self.bias_seed(run_id)?;
        let tcfg = self.train_config_for(seed);
        self.run_stage(run_id, "train", (&self.cfg.model, &tcfg), |m, out| {
            let train = self.load_dataset(m, files::TRAIN_DATA)?;
            let ck = train_erm_with(&self.cfg.model, &train, &tcfg, |e| {
                info!("{run_id}: epoch {} loss {:.4} acc {:.4}", e.epoch, e.train_loss, e.train_accuracy)
            })?;
            ck.save(&out.path(files::MODEL))?;
            out.existing(files::MODEL)?;
            out.existing(files::MODEL_SIDECAR)
        })
    }

    pub fn load_checkpoint(&self, manifest: &RunManifest, stage: &str, name: &str, sidecar: &str) -> Result<Checkpoint> {
        self.store.read_verified(manifest, stage, name)?;
        self.store.read_verified(manifest, stage, sidecar)?;
        Ok(Checkpoint::load(&self.store.artifact_path(&manifest.run_id, name))?)
    }

    /// Group metrics of `ck` on the fair test set, weighted by training prevalence.
    pub fn group_report(&self, ck: &Checkpoint, train: &Dataset, test: &Dataset) -> Result<GroupMetricsReport> {
        let counts = GroupCounts::from_pairs(train.samples.iter().map(group_key));
        let truth: Vec<GroupKey> = test.samples.iter().map(group_key).collect();
        Ok(group_metrics(&predict(&ck.params, test)?, &truth, &counts)?)
    }

    pub fn stage_eval(&self, run_id: &str) -> Result<bool> {
        self.run_stage(run_id, "eval", (), |m, out| {
            let ck = self.load_checkpoint(m, "train", files::MODEL, files::MODEL_SIDECAR)?;
            let train = self.load_dataset(m, files::TRAIN_DATA)?;
            let test = self.load_dataset(m, files::TEST_DATA)?;
            let tr = evaluate(&ck.params, &train)?;
            let te = evaluate(&ck.params, &test)?;
            let mut before = self.group_report(&ck, &train, &test)?;
            before.config_digest = Some(self.cfg.digest());
            out.bytes(files::REPORT_BEFORE, before.to_json()?.as_bytes())?;
            out.json(
                files::ERM_EVAL,
                &ErmEval { train_accuracy: tr.overall, test_accuracy: te.overall, test_per_class: te.per_class, epoch_log: ck.epoch_log },
            )
        })
    }

    pub fn stage_extract(&self, run_id: &str) -> Result<bool> {
        self.run_stage(run_id, "extract", (), |m, out| {
            let ck = self.load_checkpoint(m, "train", files::MODEL, files::MODEL_SIDECAR)?;
            let train = self.load_dataset(m, files::TRAIN_DATA)?;
            let records = extract_embeddings(&ck.params, &train)?;
            out.bytes(files::EMBEDDINGS, &embeddings_bundle(&records)?.to_bytes())
        })
    }

    pub fn load_embeddings(&self, manifest: &RunManifest) -> Result<Vec<EmbeddingRecord>> {
        let bytes = self.store.read_verified(manifest, "extract", files::EMBEDDINGS)?;
        Ok(records_from_bundle(&Bundle::read_from(&mut bytes.as_slice())?)?)
    }

    pub fn stage_intercept(&self, run_id: &str) -> Result<bool> {
        self.run_stage(run_id, "intercept", self.cfg.intercept, |m, out| {
            let records = self.load_embeddings(m)?;
            let window = self.cfg.intercept.window.unwrap_or_else(|| default_window_size(records.len()));
            let intercept = select_intercepts(&records, window, self.cfg.intercept.mode)?;
            let n_classes = records.first().map_or(0, |r| r.logits.len());
            let max_windows = (0..n_classes)
                .map(|c| Ok(select_max_window(&rank_logits(&records, c)?, window)))
                .collect::<Result<Vec<_>>>()?;
            out.json(files::INTERCEPT, &WindowArtifact { window, intercept, max_windows })
        })
    }

    fn oracle(&self) -> Result<Box<dyn DisputeOracle>> {
        Ok(match &self.cfg.oracle {
            OracleConfig::GroundTruth => Box::new(GroundTruthOracle),
            OracleConfig::AlwaysAgree => Box::new(AlwaysAgree),
            OracleConfig::External { .. } => Box::new(ExternalVqaClient::new(self.cfg.oracle.vqa_config()?.expect("external oracle"))),
        })
    }

    pub fn stage_dispute(&self, run_id: &str) -> Result<bool> {
        self.run_stage(run_id, "dispute", &self.cfg.oracle, |m, out| {
            let windows: WindowArtifact = self.store.read_json(m, "intercept", files::INTERCEPT)?;
            let train = self.load_dataset(m, files::TRAIN_DATA)?;
            let outcome = dispute_labels(self.oracle()?.as_ref(), &train, &windows.intercept.selected)?;
            info!("{run_id}: {} kept, {} disputed", outcome.kept.len(), outcome.disputed.len());
            out.json(files::DISPUTE, &outcome)
        })
    }

    pub fn stage_cluster(&self, run_id: &str) -> Result<bool> {
        let c = &self.cfg.cluster;
        self.run_stage(run_id, "cluster", c, |m, out| {
            let dispute: DisputeOutcome = self.store.read_json(m, "dispute", files::DISPUTE)?;
            let records = self.load_embeddings(m)?;
            let train = self.load_dataset(m, files::TRAIN_DATA)?;
            let mut ids = dispute.kept.clone();
            ids.sort_unstable();
            let by_id: HashMap<u64, &EmbeddingRecord> = records.iter().map(|r| (r.sample_id, r)).collect();
            let emb: Vec<&[f32]> = ids
                .iter()
                .map(|id| by_id.get(id).map(|r| r.embedding.as_slice()).ok_or_else(|| anyhow!("no embedding for {id}")))
                .collect::<Result<_>>()?;
            let index = train.index_by_id();
            let groups: Vec<usize> = ids.iter().map(|id| train.samples[index[id]].group().index()).collect();
            let minority: Vec<bool> = ids.iter().map(|id| train.samples[index[id]].group().is_minority()).collect();
            let ann = GroupAnnotations { groups: &groups, minority: &minority, n_groups: mid_core::synthgen::N_GROUPS };
            let base = KMeansConfig { k: c.k, seed: c.seed, n_init: c.n_init, max_iter: c.max_iter, init: Default::default() };
            let ks: Vec<usize> = c.k_range.iter().copied().filter(|&k| k <= ids.len()).collect();
            if !ks.contains(&c.k) {
                bail!("only {} samples survived filtering; cannot form {} clusters", ids.len(), c.k);
            }
            let sweep = sweep_k(&emb, &ks, &base, Some(&ann))?;
            let chosen = sweep.iter().find(|e| e.k == c.k).expect("k in sweep");
            let centroids: Vec<f32> = chosen.assignment.centroids.iter().flatten().map(|&v| v as f32).collect();
            let dim = chosen.assignment.centroids.first().map_or(0, Vec::len);
            out.bytes(files::CENTROIDS, &Tensor::f32(vec![c.k as u64, dim as u64], centroids)?.to_bytes())?;
            let artifact = ClusterArtifact {
                k: c.k,
                seed: c.seed,
                assignments: ids.iter().zip(&chosen.assignment.assignments).map(|(&id, &cluster)| IdCluster { id, cluster }).collect(),
                centroids_file: files::CENTROIDS.into(),
                composition: chosen.composition.clone(),
                sweep: sweep
                    .iter()
                    .map(|e| SweepSummary { k: e.k, inertia: e.assignment.inertia, sizes: e.assignment.sizes(), composition: e.composition.clone() })
                    .collect(),
            };
            out.json(files::CLUSTERS, &artifact)
        })
    }

    /// Current manual selection and its provenance, if one was saved.
    pub fn read_selection(&self, run_id: &str) -> Result<Option<(Vec<u8>, TriageSource)>> {
        let path = self.store.artifact_path(run_id, SELECTION_FILE);
        if !path.is_file() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path)?;
        let source = match std::fs::read_to_string(self.store.artifact_path(run_id, SELECTION_SOURCE_FILE)).as_deref().map(str::trim) {
            Ok("interactive") => TriageSource::Interactive,
            _ => TriageSource::Headless,
        };
        Ok(Some((bytes, source)))
    }

    pub fn stage_triage(&self, run_id: &str) -> Result<bool> {
        let policy = self.cfg.triage.policy;
        let selection = match policy {
            TriagePolicy::Manual => Some(self.read_selection(run_id)?.ok_or_else(|| AwaitingTriage { run_id: run_id.into() })?),
            TriagePolicy::Auto => None,
        };
        let key = (policy, selection.as_ref().map(|(b, s)| (crate::digest::sha256_hex(b), *s)));
        self.run_stage(run_id, "triage", key, |m, out| {
            let clusters: ClusterArtifact = self.store.read_json(m, "cluster", files::CLUSTERS)?;
            let decision = match &selection {
                Some((bytes, source)) => {
                    let h: HeadlessTriage = serde_json::from_slice(bytes).context("selection is not a valid triage document")?;
                    if h.run_id != run_id {
                        bail!("selection is for run {}, not {run_id}", h.run_id);
                    }
                    triage_from_entries(&h.decisions, clusters.k, *source)?
                }
                None => auto_triage(clusters.composition.as_deref().ok_or_else(|| anyhow!("auto triage needs ground-truth composition"))?)?,
            };
            if !decision.has_retrain() {
                bail!("no cluster is tagged Retrain");
            }
            out.json(files::TRIAGE, &decision)
        })
    }

    pub fn stage_retrain(&self, run_id: &str) -> Result<bool> {
        self.run_stage(run_id, "retrain", &self.cfg.retrain, |m, out| {
            let decision: TriageDecision = self.store.read_json(m, "triage", files::TRIAGE)?;
            let clusters: ClusterArtifact = self.store.read_json(m, "cluster", files::CLUSTERS)?;
            let train = self.load_dataset(m, files::TRAIN_DATA)?;
            let records = self.load_embeddings(m)?;
            let ck = self.load_checkpoint(m, "train", files::MODEL, files::MODEL_SIDECAR)?;
            let retrain_clusters = decision.retrain_clusters();
            let ids: Vec<u64> = retrain_clusters.iter().flat_map(|&c| clusters.members(c)).collect();
            let pool: Vec<(u64, usize)> = train.samples.iter().map(|s| (s.id, s.label)).collect();
            let split = assemble_retrain_set(&ids, &pool, self.cfg.retrain.majority_mix_fraction, self.cfg.retrain.rng_seed)?;
            let labels: HashMap<u64, usize> = pool.iter().copied().collect();
            let (params, outcome) = retrain_last_layer(&ck.params, &records, &labels, &split, &self.cfg.retrain)?;
            info!("{run_id}: retrained on {} ids, lambda {}", split.all_ids().len(), outcome.tuning.lambda);
            let retrained = Checkpoint { params, train_config: ck.train_config, epoch_log: ck.epoch_log };
            retrained.save(&out.path(files::RETRAINED))?;
            out.existing(files::RETRAINED)?;
            out.existing(files::RETRAINED_SIDECAR)?;
            out.json(files::RETRAIN, &RetrainArtifact { retrain_clusters, n_retrain_ids: ids.len(), split, outcome })
        })
    }

    pub fn stage_metrics(&self, run_id: &str) -> Result<bool> {
        self.run_stage(run_id, "metrics", (), |m, out| {
            let train = self.load_dataset(m, files::TRAIN_DATA)?;
            let test = self.load_dataset(m, files::TEST_DATA)?;
            let erm = self.load_checkpoint(m, "train", files::MODEL, files::MODEL_SIDECAR)?;
            let after = self.load_checkpoint(m, "retrain", files::RETRAINED, files::RETRAINED_SIDECAR)?;
            let before: GroupMetricsReport = self.store.read_json(m, "eval", files::REPORT_BEFORE)?;
            let mut after_r = self.group_report(&after, &train, &test)?;
            after_r.config_digest = Some(self.cfg.digest());

            let windows: WindowArtifact = self.store.read_json(m, "intercept", files::INTERCEPT)?;
            let dispute: DisputeOutcome = self.store.read_json(m, "dispute", files::DISPUTE)?;
            let retrain: RetrainArtifact = self.store.read_json(m, "retrain", files::RETRAIN)?;
            let train_pred = predict(&erm.params, &train)?;
            let errors: Vec<u64> = train.samples.iter().zip(&train_pred).filter(|(s, &p)| s.label != p).map(|(s, _)| s.id).collect();
            let selected: std::collections::HashSet<u64> = windows.intercept.selected.iter().copied().collect();
            let captured = errors.iter().filter(|id| selected.contains(id)).count();
            let summary = MidSummary {
                run_id: run_id.into(),
                intercept_size: windows.intercept.selected.len(),
                disputed: dispute.disputed.len(),
                kept: dispute.kept.len(),
                erm_errors_in_intercept: if errors.is_empty() { 0.0 } else { captured as f64 / errors.len() as f64 },
                lambda: retrain.outcome.tuning.lambda,
                before_wga: before.worst_group_accuracy,
                after_wga: after_r.worst_group_accuracy,
                before_weighted_mean: before.weighted_mean_accuracy,
                after_weighted_mean: after_r.weighted_mean_accuracy,
            };
            out.bytes(files::REPORT_AFTER, after_r.to_json()?.as_bytes())?;
            out.json(files::SUMMARY, &summary)
        })
    }

    /// Data generation, ERM training and evaluation.
    pub fn run_erm(&self, run_id: &str) -> Result<ErmEval> {
        self.stage_data(run_id)?;
        self.stage_train(run_id)?;
        self.stage_eval(run_id)?;
        let m = self.store.load_manifest(run_id)?;
        self.store.read_json(&m, "eval", files::ERM_EVAL)
    }

    /// Analysis and mitigation steps after ERM training, then evaluation.
    /// Returns the before and after reports.
    pub fn run_mid(&self, run_id: &str) -> Result<(GroupMetricsReport, GroupMetricsReport)> {
        self.run_erm(run_id)?;
        self.stage_extract(run_id)?;
        self.stage_intercept(run_id)?;
        self.stage_dispute(run_id)?;
        self.stage_cluster(run_id)?;
        self.stage_triage(run_id)?;
        self.stage_retrain(run_id)?;
        self.stage_metrics(run_id)?;
        let m = self.store.load_manifest(run_id)?;
        Ok((self.store.read_json(&m, "eval", files::REPORT_BEFORE)?, self.store.read_json(&m, "metrics", files::REPORT_AFTER)?))
    }
}

pub fn group_key(s: &mid_core::synthgen::LabeledSample) -> GroupKey {
    (s.label, s.spurious.index())
}
