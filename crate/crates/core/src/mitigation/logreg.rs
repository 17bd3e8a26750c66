use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Per-feature affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation; constant features keep scale 1.
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[Vec<f64>]) -> Result<Self> {
        let first = x.first().ok_or_else(|| Error::Empty("no rows to standardize".into()))?;
        let (n, dim) = (x.len() as f64, first.len());
        let mut mean = vec![0.0; dim];
        for row in x {
            if row.len() != dim {
                return Err(invalid("rows differ in length"));
            }
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in x {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var.into_iter().map(|s| (s / n).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn apply_all(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter().map(|r| self.apply(r)).collect()
    }
}

/// Multinomial linear classifier `logits = W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub n_classes: usize,
    pub dim: usize,
    /// Row-major `[n_classes, dim]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        Self { n_classes, dim, weights: vec![0.0; n_classes * dim], bias: vec![0.0; n_classes] }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_classes)
            .map(|c| self.bias[c] + self.weights[c * self.dim..(c + 1) * self.dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Highest logit; ties go to the lower class.
    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        (0..z.len()).fold(0, |best, c| if z[c] > z[best] { c } else { best })
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        let correct = x.iter().zip(y).filter(|(r, &l)| self.predict(r) == l).count();
        correct as f64 / x.len().max(1) as f64
    }

    pub fn zero_weights(&self) -> usize {
        self.weights.iter().filter(|&&w| w == 0.0).count()
    }

    /// Folds a standardizer into the weights so the classifier takes raw
    /// features.
    pub fn unstandardize(&self, std: &Standardizer) -> Self {
        let mut out = self.clone();
        for c in 0..self.n_classes {
            let mut shift = 0.0;
            for j in 0..self.dim {
                let w = self.weights[c * self.dim + j] / std.scale[j];
                out.weights[c * self.dim + j] = w;
                shift += w * std.mean[j];
            }
            out.bias[c] -= shift;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L1Options {
    /// Stop once the objective changes by at most this much.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for L1Options {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L1Fit {
    pub classifier: LinearClassifier,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Mean cross-entropy of the classifier.
fn mean_cross_entropy(clf: &LinearClassifier, x: &[Vec<f64>], y: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in x.iter().zip(y) {
        let z = clf.logits(row);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - z[label];
    }
    total / x.len() as f64
}

/// Mean cross-entropy plus `lambda * ||W||_1`; the bias is not penalized.
pub fn l1_objective(clf: &LinearClassifier, x: &[Vec<f64>], y: &[usize], lambda: f64) -> f64 {
    mean_cross_entropy(clf, x, y) + lambda * clf.weights.iter().map(|w| w.abs()).sum::<f64>()
}

/// Smooth loss and its gradient as a classifier-shaped value.
fn loss_and_grad(clf: &LinearClassifier, x: &[Vec<f64>], y: &[usize]) -> (f64, LinearClassifier) {
    let n = x.len() as f64;
    let mut grad = LinearClassifier::zeros(clf.n_classes, clf.dim);
    let mut total = 0.0;
    for (row, &label) in x.iter().zip(y) {
        let z = clf.logits(row);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = e.iter().sum();
        total += max + sum.ln() - z[label];
        for c in 0..clf.n_classes {
            let d = (e[c] / sum - if c == label { 1.0 } else { 0.0 }) / n;
            grad.bias[c] += d;
            for (g, v) in grad.weights[c * clf.dim..(c + 1) * clf.dim].iter_mut().zip(row) {
                *g += d * v;
            }
        }
    }
    (total / n, grad)
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn check_problem(x: &[Vec<f64>], y: &[usize], n_classes: usize, lambda: f64) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::Empty("no training rows".into()));
    }
    if x.len() != y.len() {
        return Err(invalid(format!("{} rows but {} labels", x.len(), y.len())));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid(format!("regularization strength {lambda} must be finite and >= 0")));
    }
    let dim = x[0].len();
    if x.iter().any(|r| r.len() != dim || r.iter().any(|v| !v.is_finite())) {
        return Err(invalid("rows must share one length and be finite"));
    }
    let mut present = vec![false; n_classes];
    for &l in y {
        *present.get_mut(l).ok_or_else(|| invalid(format!("label {l} out of range for {n_classes} classes")))? = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(invalid("logistic regression needs at least two classes"));
    }
    Ok(dim)
}

/// L1-regularized multinomial logistic regression by proximal gradient
/// descent with a backtracking step size.
pub fn fit_l1_logreg(x: &[Vec<f64>], y: &[usize], n_classes: usize, lambda: f64, opts: &L1Options) -> Result<L1Fit> {
    let dim = check_problem(x, y, n_classes, lambda)?;
    let mut clf = LinearClassifier::zeros(n_classes, dim);
    let (mut loss, mut grad) = loss_and_grad(&clf, x, y);
    let mut objective = loss;
    let mut step = 1.0;
    for iter in 1..=opts.max_iter {
        step *= 2.0;
        let (cand, cand_loss) = loop {
            let mut cand = clf.clone();
            for (w, g) in cand.weights.iter_mut().zip(&grad.weights) {
                *w = soft_threshold(*w - step * g, step * lambda);
            }
            for (b, g) in cand.bias.iter_mut().zip(&grad.bias) {
                *b -= step * g;
            }
            let cand_loss = mean_cross_entropy(&cand, x, y);
            let (mut lin, mut quad) = (0.0, 0.0);
            for ((c, o), g) in cand.weights.iter().chain(&cand.bias).zip(clf.weights.iter().chain(&clf.bias)).zip(grad.weights.iter().chain(&grad.bias)) {
                lin += g * (c - o);
                quad += (c - o) * (c - o);
            }
            if cand_loss <= loss + lin + quad / (2.0 * step) + 1e-15 || step < 1e-12 {
                break (cand, cand_loss);
            }
            step *= 0.5;
        };
        let cand_objective = cand_loss + lambda * cand.weights.iter().map(|w| w.abs()).sum::<f64>();
        if !cand_objective.is_finite() {
            return Err(Error::NotConverged { objective: cand_objective });
        }
        let change = (objective - cand_objective).abs();
        clf = cand;
        objective = cand_objective;
        if change <= opts.tol {
            return Ok(L1Fit { classifier: clf, objective, iterations: iter, converged: true });
        }
        (loss, grad) = loss_and_grad(&clf, x, y);
    }
    Ok(L1Fit { classifier: clf, objective, iterations: opts.max_iter, converged: false })
}
