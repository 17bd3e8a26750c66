//! ERM training loop, evaluation and embedding extraction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{argmax, Scalar};
use super::model::{forward_batch, loss_grad_correct, sgd_step, ModelParams, ModelSpec};
use crate::error::{invalid, Error, Result};
use crate::midt::{Bundle, Tensor};
use crate::synthgen::{Dataset, SpriteImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Loss {
    #[default]
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub epochs: usize,
    pub rng_seed: u64,
    #[serde(default)]
    pub loss: Loss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, optimizer: Optimizer::Adam, batch_size: 1000, epochs: 10, rng_seed: 0, loss: Loss::CrossEntropy }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Running accuracy over the epoch's mini-batches.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub train_config: TrainConfig,
    pub epoch_log: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointSidecar {
    spec: ModelSpec,
    train_config: TrainConfig,
    epoch_log: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn spec(&self) -> &ModelSpec {
        &self.params.spec
    }

    /// Writes `<path>` (MIDT bundle) and `<path>.json` (sidecar).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.to_bundle()?.save(path)?;
        let sidecar = CheckpointSidecar {
            spec: self.params.spec.clone(),
            train_config: self.train_config.clone(),
            epoch_log: self.epoch_log.clone(),
        };
        std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar: CheckpointSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
        let params = ModelParams::from_bundle(&sidecar.spec, &Bundle::load(path)?)?;
        Ok(Self { params, train_config: sidecar.train_config, epoch_log: sidecar.epoch_log })
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    fn new(params: &ModelParams<f32>, lr: f32) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    fn step(&mut self, params: &mut ModelParams<f32>, grads: &ModelParams<f32>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.tensors.iter_mut().zip(&grads.tensors).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Flattened pixel inputs for the given sample indices.
pub fn batch_inputs<T: Scalar>(dataset: &Dataset, indices: &[usize], side: usize) -> Vec<T> {
    let n = side * side;
    let mut out = vec![T::zero(); indices.len() * n];
    for (slot, &i) in indices.iter().enumerate() {
        dataset.samples[i].image.write_pixels(side, &mut out[slot * n..(slot + 1) * n]);
    }
    out
}

pub fn image_input<T: Scalar>(image: &SpriteImage, side: usize) -> Vec<T> {
    let mut out = vec![T::zero(); side * side];
    image.write_pixels(side, &mut out);
    out
}

/// Trains the classifier from a seeded initialization by mini-batch ERM.
///
/// Deterministic given `(spec, dataset, cfg)`. `progress` is called after
/// every epoch.
pub fn train_erm_with(spec: &ModelSpec, dataset: &Dataset, cfg: &TrainConfig, mut progress: impl FnMut(&EpochLog)) -> Result<Checkpoint> {
    spec.validate()?;
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    if spec.input_side != 64 && spec.input_side != 32 {
        return Err(invalid(format!("sprite inputs must be 64 or 32 pixels wide, spec has {}", spec.input_side)));
    }
    let mut params = ModelParams::<f32>::init(spec, cfg.rng_seed)?;
    let mut adam = Adam::new(&params, cfg.learning_rate as f32);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let labels = dataset.labels();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        rng.set_stream(2 + epoch as u64);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let x: Vec<f32> = batch_inputs(dataset, idx, spec.input_side);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (loss, grads, ok) = loss_grad_correct(&params, &x, &y).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss: loss as f64 });
            }
            loss_sum += loss as f64 * idx.len() as f64;
            correct += ok;
            match cfg.optimizer {
                Optimizer::Adam => adam.step(&mut params, &grads),
                Optimizer::Sgd => sgd_step(&mut params, &grads, cfg.learning_rate as f32),
            }
        }
        if !params.all_finite() {
            return Err(Error::Diverged { epoch, loss: f64::NAN });
        }
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / dataset.len() as f64,
            train_accuracy: correct as f64 / dataset.len() as f64,
        };
        progress(&entry);
        log.push(entry);
    }
    Ok(Checkpoint { params, train_config: cfg.clone(), epoch_log: log })
}

pub fn train_erm(spec: &ModelSpec, dataset: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    train_erm_with(spec, dataset, cfg, |_| {})
}

/// Penultimate activations and logits of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub sample_id: u64,
    pub embedding: Vec<f32>,
    pub logits: Vec<f32>,
}

/// Embedding and raw logits of one image.
pub fn forward(params: &ModelParams<f32>, image: &SpriteImage) -> Result<(Vec<f32>, Vec<f32>)> {
    forward_batch(params, &image_input::<f32>(image, params.spec.input_side))
}

const EVAL_BATCH: usize = 500;

pub fn extract_embeddings(params: &ModelParams<f32>, dataset: &Dataset) -> Result<Vec<EmbeddingRecord>> {
    let d = params.spec.embedding_dim();
    let nc = params.spec.n_classes;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut out = Vec::with_capacity(dataset.len());
    for idx in all.chunks(EVAL_BATCH) {
        let x: Vec<f32> = batch_inputs(dataset, idx, params.spec.input_side);
        let (emb, logits) = forward_batch(params, &x)?;
        for (slot, &i) in idx.iter().enumerate() {
            out.push(EmbeddingRecord {
                sample_id: dataset.samples[i].id,
                embedding: emb[slot * d..(slot + 1) * d].to_vec(),
                logits: logits[slot * nc..(slot + 1) * nc].to_vec(),
            });
        }
    }
    Ok(out)
}

/// Argmax predictions (ties to the lowest class index).
pub fn predict(params: &ModelParams<f32>, dataset: &Dataset) -> Result<Vec<usize>> {
    Ok(extract_embeddings(params, dataset)?.iter().map(|r| argmax(&r.logits)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Accuracy per true class; `None` when the class is absent.
    pub per_class: Vec<Option<f64>>,
    pub overall: f64,
}

pub fn accuracy_from_predictions(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let mut hits = vec![0usize; n_classes];
    let mut totals = vec![0usize; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        totals[y] += 1;
        hits[y] += (p == y) as usize;
    }
    Ok(Evaluation {
        per_class: hits.iter().zip(&totals).map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64)).collect(),
        overall: hits.iter().sum::<usize>() as f64 / labels.len() as f64,
    })
}

pub fn evaluate(params: &ModelParams<f32>, dataset: &Dataset) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let preds = predict(params, dataset)?;
    accuracy_from_predictions(&preds, &dataset.labels(), params.spec.n_classes)
}

/// Writes an embeddings table: `ids` (u64), `embeddings` and `logits` (f32).
pub fn save_embeddings(records: &[EmbeddingRecord], path: &Path) -> Result<()> {
    embeddings_bundle(records)?.save(path)
}

pub fn embeddings_bundle(records: &[EmbeddingRecord]) -> Result<Bundle> {
    let n = records.len() as u64;
    let d = records.first().map_or(0, |r| r.embedding.len());
    let c = records.first().map_or(0, |r| r.logits.len());
    if records.iter().any(|r| r.embedding.len() != d || r.logits.len() != c) {
        return Err(invalid("embedding records have inconsistent lengths"));
    }
    let mut b = Bundle::new();
    b.push("ids", Tensor::u64(vec![n], records.iter().map(|r| r.sample_id).collect())?);
    b.push("embeddings", Tensor::f32(vec![n, d as u64], records.iter().flat_map(|r| r.embedding.iter().copied()).collect())?);
    b.push("logits", Tensor::f32(vec![n, c as u64], records.iter().flat_map(|r| r.logits.iter().copied()).collect())?);
    Ok(b)
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    records_from_bundle(&Bundle::load(path)?)
}

pub fn records_from_bundle(b: &Bundle) -> Result<Vec<EmbeddingRecord>> {
    let ids = b.get("ids")?.as_u64()?;
    let emb = b.get("embeddings")?;
    let logits = b.get("logits")?;
    let n = ids.len();
    let check = |t: &Tensor, what: &str| -> Result<usize> {
        if t.dims.len() != 2 || t.dims[0] as usize != n {
            return Err(Error::Format(format!("{what} must be [{n}, d], got {:?}", t.dims)));
        }
        Ok(t.dims[1] as usize)
    };
    let d = check(emb, "embeddings")?;
    let c = check(logits, "logits")?;
    let (e, l) = (emb.as_f32()?, logits.as_f32()?);
    Ok((0..n)
        .map(|i| EmbeddingRecord {
            sample_id: ids[i],
            embedding: e[i * d..(i + 1) * d].to_vec(),
            logits: l[i * c..(i + 1) * c].to_vec(),
        })
        .collect())
}
