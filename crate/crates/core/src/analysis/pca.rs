use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Principal axes fitted on a set of embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit component vectors, by decreasing explained variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// eigenvalues and column eigenvectors (row-major `n x n`).
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        let scale: f64 = a.iter().map(|x| x * x).sum();
        if off <= 1e-24 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

impl Pca {
    /// Fits `n_components` axes. Each component's sign is fixed so its
    /// largest-magnitude coordinate is positive.
    pub fn fit<V: AsRef<[f32]>>(embeddings: &[V], n_components: usize) -> Result<Self> {
        if embeddings.len() < 2 {
            return Err(Error::Empty("PCA needs at least two points".into()));
        }
        let dim = embeddings[0].as_ref().len();
        if embeddings.iter().any(|e| e.as_ref().len() != dim) {
            return Err(invalid("embeddings differ in length"));
        }
        if n_components == 0 || n_components > dim {
            return Err(invalid(format!("n_components = {n_components} must be in 1..={dim}")));
        }
        let n = embeddings.len() as f64;
        let mut mean = vec![0.0; dim];
        for e in embeddings {
            for (m, &v) in mean.iter_mut().zip(e.as_ref()) {
                *m += v as f64 / n;
            }
        }
        let mut cov = vec![0.0; dim * dim];
        let mut centered = vec![0.0; dim];
        for e in embeddings {
            for ((c, &v), m) in centered.iter_mut().zip(e.as_ref()).zip(&mean) {
                *c = v as f64 - m;
            }
            for i in 0..dim {
                for j in i..dim {
                    cov[i * dim + j] += centered[i] * centered[j];
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                let v = cov[i * dim + j] / (n - 1.0);
                cov[i * dim + j] = v;
                cov[j * dim + i] = v;
            }
        }
        if cov.iter().all(|&v| v == 0.0) {
            return Err(invalid("all embeddings are identical; no principal axes"));
        }
        let (values, vectors) = jacobi_eigen(cov, dim);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        let mut components = Vec::with_capacity(n_components);
        let mut explained_variance = Vec::with_capacity(n_components);
        for &c in order.iter().take(n_components) {
            let mut axis: Vec<f64> = (0..dim).map(|k| vectors[k * dim + c]).collect();
            let pivot = axis.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if pivot < 0.0 {
                axis.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(axis);
            explained_variance.push(values[c].max(0.0));
        }
        Ok(Self { mean, components, explained_variance })
    }

    pub fn transform(&self, embedding: &[f32]) -> Result<Vec<f64>> {
        if embedding.len() != self.mean.len() {
            return Err(Error::ShapeMismatch { expected: format!("[{}]", self.mean.len()), actual: format!("[{}]", embedding.len()) });
        }
        Ok(self
            .components
            .iter()
            .map(|axis| axis.iter().zip(embedding).zip(&self.mean).map(|((a, &v), m)| a * (v as f64 - m)).sum())
            .collect())
    }
}

/// 2-D coordinates for plotting.
pub fn project_2d<V: AsRef<[f32]>>(embeddings: &[V]) -> Result<Vec<[f64; 2]>> {
    let pca = Pca::fit(embeddings, 2.min(embeddings.first().map_or(0, |e| e.as_ref().len())))?;
    embeddings
        .iter()
        .map(|e| {
            let p = pca.transform(e.as_ref())?;
            Ok([p[0], p.get(1).copied().unwrap_or(0.0)])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_dominant_axis() {
        let pts: Vec<Vec<f32>> = (0..50).map(|i| {
            let t = i as f32 - 25.0;
            vec![t, 0.5 * t + if i % 2 == 0 { 0.1 } else { -0.1 }, 0.0]
        }).collect();
        let pca = Pca::fit(&pts, 2).unwrap();
        let a = &pca.components[0];
        let norm = (1.0f64 + 0.25).sqrt();
        assert!((a[0] - 1.0 / norm).abs() < 1e-3 && (a[1] - 0.5 / norm).abs() < 1e-3, "{a:?}");
        assert!(pca.explained_variance[0] > pca.explained_variance[1]);
    }

    #[test]
    fn eigen_matches_known_matrix() {
        let (vals, _) = jacobi_eigen(vec![2.0, 1.0, 1.0, 2.0], 2);
        let mut vals = vals;
        vals.sort_by(f64::total_cmp);
        assert!((vals[0] - 1.0).abs() < 1e-12 && (vals[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn components_are_orthonormal() {
        let pts: Vec<Vec<f32>> = (0..40).map(|i| vec![(i as f32 * 0.7).sin(), (i as f32 * 1.3).cos(), i as f32 * 0.01, ((i * i) % 7) as f32]).collect();
        let pca = Pca::fit(&pts, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d: f64 = pca.components[i].iter().zip(&pca.components[j]).map(|(a, b)| a * b).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_points_rejected() {
        assert!(Pca::fit(&vec![vec![1.0f32, 2.0]; 5], 1).is_err());
        assert!(project_2d(&[vec![1.0f32]]).is_err());
    }
}
