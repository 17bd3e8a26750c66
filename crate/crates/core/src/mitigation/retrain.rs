use std::collections::{BTreeSet, HashMap};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::logreg::{fit_l1_logreg, L1Options, LinearClassifier, Standardizer};
use crate::error::{invalid, Error, Result};
use crate::nncore::{EmbeddingRecord, ModelParams};

pub const DEFAULT_L1_GRID: [f64; 7] = [1.0, 0.7, 0.3, 0.1, 0.07, 0.03, 0.01];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainConfig {
    pub l1_grid: Vec<f64>,
    pub n_repeats: usize,
    /// Extra random training points, as a fraction of the retrain set.
    pub majority_mix_fraction: f64,
    /// Share of the retrain set each repeat is fitted on.
    #[serde(default = "default_subset_fraction")]
    pub subset_fraction: f64,
    pub rng_seed: u64,
    #[serde(default)]
    pub solver: L1Options,
}

fn default_subset_fraction() -> f64 {
    0.5
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            l1_grid: DEFAULT_L1_GRID.to_vec(),
            n_repeats: 10,
            majority_mix_fraction: 0.5,
            subset_fraction: default_subset_fraction(),
            rng_seed: 0,
            solver: L1Options::default(),
        }
    }
}

impl RetrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l1_grid.is_empty() || self.l1_grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(invalid("l1_grid must be non-empty with positive strengths"));
        }
        if self.n_repeats == 0 {
            return Err(invalid("n_repeats must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.majority_mix_fraction) {
            return Err(invalid("majority_mix_fraction must lie in [0, 1]"));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(invalid("subset_fraction must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Class-balanced halves of the retraining data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrainSplit {
    /// Scores each candidate strength. Ascending ids.
    pub tune: Vec<u64>,
    /// Fits each candidate strength. Ascending ids.
    pub fit: Vec<u64>,
    /// How many of the ids were drawn from outside the retrain clusters.
    pub n_mixed_in: usize,
}

impl RetrainSplit {
    pub fn all_ids(&self) -> Vec<u64> {
        let set: BTreeSet<u64> = self.tune.iter().chain(&self.fit).copied().collect();
        set.into_iter().collect()
    }
}

fn balance(ids: &[u64], labels: &HashMap<u64, usize>) -> Result<Vec<u64>> {
    let mut by_class: HashMap<usize, Vec<u64>> = HashMap::new();
    for &id in ids {
        by_class.entry(labels[&id]).or_default().push(id);
    }
    if by_class.len() < 2 {
        return Err(invalid("a retrain half holds a single class; logistic regression is undefined"));
    }
    let keep = by_class.values().map(Vec::len).min().unwrap_or(0);
    let mut out: Vec<u64> = by_class.into_values().flat_map(|v| v.into_iter().take(keep)).collect();
    out.sort_unstable();
    Ok(out)
}

/// Retrain-cluster ids plus `ceil(mix * n)` other training points, shuffled,
/// cut in half and class-balanced within each half by downsampling.
///
/// `pool` holds `(id, label)` of every training sample.
pub fn assemble_retrain_set(retrain_ids: &[u64], pool: &[(u64, usize)], mix: f64, seed: u64) -> Result<RetrainSplit> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(invalid("mix fraction must lie in [0, 1]"));
    }
    let labels: HashMap<u64, usize> = pool.iter().copied().collect();
    let chosen: BTreeSet<u64> = retrain_ids.iter().copied().collect();
    if chosen.len() < 2 {
        return Err(invalid("need at least two samples in retrain clusters"));
    }
    if let Some(id) = chosen.iter().find(|id| !labels.contains_key(id)) {
        return Err(invalid(format!("retrain id {id} is not in the training pool")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut others: Vec<u64> = pool.iter().map(|p| p.0).filter(|id| !chosen.contains(id)).collect();
    others.sort_unstable();
    let n_extra = ((mix * chosen.len() as f64).ceil() as usize).min(others.len());
    let mut all: Vec<u64> = chosen.iter().copied().collect();
    all.extend(index::sample(&mut rng, others.len(), n_extra).into_iter().map(|i| others[i]));
    all.shuffle(&mut rng);
    let (tune, fit) = all.split_at(all.len() / 2);
    Ok(RetrainSplit { tune: balance(tune, &labels)?, fit: balance(fit, &labels)?, n_mixed_in: n_extra })
}

/// Rows of embedding features with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub ids: Vec<u64>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
}

impl FeatureSet {
    pub fn gather(records: &[EmbeddingRecord], labels: &HashMap<u64, usize>, ids: &[u64]) -> Result<Self> {
        let index: HashMap<u64, &EmbeddingRecord> = records.iter().map(|r| (r.sample_id, r)).collect();
        let mut out = Self { ids: Vec::with_capacity(ids.len()), x: Vec::with_capacity(ids.len()), y: Vec::with_capacity(ids.len()) };
        for &id in ids {
            let rec = index.get(&id).ok_or_else(|| invalid(format!("no embedding for sample {id}")))?;
            let &label = labels.get(&id).ok_or_else(|| invalid(format!("no label for sample {id}")))?;
            out.ids.push(id);
            out.x.push(rec.embedding.iter().map(|&v| v as f64).collect());
            out.y.push(label);
        }
        Ok(out)
    }

    fn standardized(&self, std: &Standardizer) -> Self {
        Self { ids: self.ids.clone(), x: std.apply_all(&self.x), y: self.y.clone() }
    }

    fn rows(&self, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
        (idx.iter().map(|&i| self.x[i].clone()).collect(), idx.iter().map(|&i| self.y[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub lambda: f64,
    /// `(lambda, tune accuracy)` in grid order.
    pub scores: Vec<(f64, f64)>,
}

/// Fits every strength on `fit` and keeps the one scoring best on `tune`;
/// ties go to the larger strength.
pub fn tune_l1_strength(tune: &FeatureSet, fit: &FeatureSet, n_classes: usize, grid: &[f64], opts: &L1Options) -> Result<TuneResult> {
    if grid.is_empty() {
        return Err(invalid("empty regularization grid"));
    }
    let mut scores = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &lambda in grid {
        let model = fit_l1_logreg(&fit.x, &fit.y, n_classes, lambda, opts)?;
        let acc = model.classifier.accuracy(&tune.x, &tune.y);
        scores.push((lambda, acc));
        let better = match best {
            None => true,
            Some((bl, ba)) => acc > ba || (acc == ba && lambda > bl),
        };
        if better {
            best = Some((lambda, acc));
        }
    }
    Ok(TuneResult { lambda: best.expect("grid non-empty").0, scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainOutcome {
    pub tuning: TuneResult,
    pub standardizer: Standardizer,
    /// Averaged classifier on standardized features.
    pub classifier: LinearClassifier,
    /// Same classifier with the standardization folded in.
    pub raw_classifier: LinearClassifier,
    pub repeats_converged: Vec<bool>,
}

/// Tunes the L1 strength on the halves, then averages `n_repeats` fits on
/// random subsets of the whole retrain set. Returns the new model, whose
/// encoder is a bitwise copy of `params`, and the fit details.
pub fn retrain_last_layer(
    params: &ModelParams<f32>,
    records: &[EmbeddingRecord],
    labels: &HashMap<u64, usize>,
    split: &RetrainSplit,
    cfg: &RetrainConfig,
) -> Result<(ModelParams<f32>, RetrainOutcome)> {
    cfg.validate()?;
    let n_classes = params.spec.n_classes;
    let tune_raw = FeatureSet::gather(records, labels, &split.tune)?;
    let fit_raw = FeatureSet::gather(records, labels, &split.fit)?;
    let full_raw = FeatureSet::gather(records, labels, &split.all_ids())?;
    if full_raw.x.first().map(Vec::len) != Some(params.spec.embedding_dim()) {
        return Err(invalid("embedding width does not match the model"));
    }
    let standardizer = Standardizer::fit(&full_raw.x)?;
    let (tune, fit, full) = (tune_raw.standardized(&standardizer), fit_raw.standardized(&standardizer), full_raw.standardized(&standardizer));
    let tuning = tune_l1_strength(&tune, &fit, n_classes, &cfg.l1_grid, &cfg.solver)?;

    let n = full.ids.len();
    let take = ((cfg.subset_fraction * n as f64).round() as usize).clamp(1, n);
    let mut avg = LinearClassifier::zeros(n_classes, params.spec.embedding_dim());
    let mut repeats_converged = Vec::with_capacity(cfg.n_repeats);
    for repeat in 0..cfg.n_repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        rng.set_stream(repeat as u64 + 1);
        let mut idx = index::sample(&mut rng, n, take).into_vec();
        idx.sort_unstable();
        let (x, y) = full.rows(&idx);
        let model = fit_l1_logreg(&x, &y, n_classes, tuning.lambda, &cfg.solver)
            .map_err(|e| Error::RepeatFailed { repeat, source: Box::new(e) })?;
        // running mean keeps identical repeats exact
        let k = (repeat + 1) as f64;
        for (a, w) in avg.weights.iter_mut().chain(avg.bias.iter_mut()).zip(model.classifier.weights.iter().chain(&model.classifier.bias)) {
            *a += (w - *a) / k;
        }
        repeats_converged.push(model.converged);
    }
    let raw_classifier = avg.unstandardize(&standardizer);
    let mut out = params.clone();
    out.set_classifier(
        raw_classifier.weights.iter().map(|&v| v as f32).collect(),
        raw_classifier.bias.iter().map(|&v| v as f32).collect(),
    )?;
    Ok((out, RetrainOutcome { tuning, standardizer, classifier: avg, raw_classifier, repeats_converged }))
}
