use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SortKey {
    Label,
    SpuriousAttribute,
}

/// One embedding with the attributes an RSM can be sorted by.
#[derive(Debug, Clone, PartialEq)]
pub struct RsmInput<'a> {
    pub id: u64,
    pub label: usize,
    pub spurious: usize,
    pub embedding: &'a [f32],
}

/// Pairwise cosine similarities, rows ordered by the sort key then id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsmMatrix {
    pub sort_key: SortKey,
    /// Sample id of each row.
    pub order: Vec<u64>,
    /// Sort-key value of each row.
    pub keys: Vec<usize>,
    /// Row-major `n x n`.
    pub values: Vec<f32>,
}

impl RsmMatrix {
    pub fn n(&self) -> usize {
        self.order.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.n() + j]
    }

    /// Start index of every block of equal keys.
    pub fn key_boundaries(&self) -> Vec<usize> {
        (0..self.keys.len()).filter(|&i| i == 0 || self.keys[i] != self.keys[i - 1]).collect()
    }
}

/// Cosine-similarity matrix of the inputs.
pub fn cosine_rsm(inputs: &[RsmInput<'_>], sort_key: SortKey) -> Result<RsmMatrix> {
    if inputs.len() < 2 {
        return Err(invalid("an RSM needs at least two embeddings"));
    }
    let dim = inputs[0].embedding.len();
    if inputs.iter().any(|x| x.embedding.len() != dim) {
        return Err(invalid("embeddings differ in length"));
    }
    let key = |x: &RsmInput<'_>| match sort_key {
        SortKey::Label => x.label,
        SortKey::SpuriousAttribute => x.spurious,
    };
    let mut sorted: Vec<&RsmInput<'_>> = inputs.iter().collect();
    sorted.sort_by_key(|x| (key(x), x.id));

    let unit: Vec<Vec<f64>> = sorted
        .iter()
        .map(|x| {
            let norm = x.embedding.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm { id: x.id });
            }
            Ok(x.embedding.iter().map(|&v| v as f64 / norm).collect())
        })
        .collect::<Result<_>>()?;

    let n = unit.len();
    let mut values = vec![0f32; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let s = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0) as f32;
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    Ok(RsmMatrix {
        sort_key,
        order: sorted.iter().map(|x| x.id).collect(),
        keys: sorted.iter().map(|x| key(x)).collect(),
        values,
    })
}

/// Mean within-block similarity minus mean between-block similarity.
///
/// `boundaries` are the ascending start rows of each block; the first must
/// be 0. Diagonal entries are excluded from the within-block mean.
pub fn block_contrast(rsm: &RsmMatrix, boundaries: &[usize]) -> Result<f64> {
    let n = rsm.n();
    if boundaries.first() != Some(&0) {
        return Err(invalid("block boundaries must start at row 0"));
    }
    let mut block = vec![0usize; n];
    for (b, w) in boundaries.iter().chain(std::iter::once(&n)).collect::<Vec<_>>().windows(2).enumerate() {
        let (start, end) = (*w[0], *w[1]);
        if end <= start || end > n {
            return Err(invalid(format!("block {b} is empty or out of range ({start}..{end})")));
        }
        block[start..end].fill(b);
    }
    if boundaries.len() < 2 {
        return Err(invalid("need at least two blocks"));
    }
    let (mut within, mut n_within, mut between, mut n_between) = (0.0f64, 0usize, 0.0f64, 0usize);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let v = rsm.get(i, j) as f64;
            if block[i] == block[j] {
                within += v;
                n_within += 1;
            } else {
                between += v;
                n_between += 1;
            }
        }
    }
    if n_within == 0 {
        return Err(invalid("every block has a single row; within-block mean undefined"));
    }
    Ok(within / n_within as f64 - between / n_between as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn input(id: u64, label: usize, e: &[f32]) -> RsmInput<'_> {
        RsmInput { id, label, spurious: 0, embedding: e }
    }

    #[test]
    fn identical_and_orthogonal() {
        let (a, b, c) = ([1.0, 0.0], [2.0, 0.0], [0.0, 3.0]);
        let rsm = cosine_rsm(&[input(0, 0, &a), input(1, 0, &b), input(2, 1, &c)], SortKey::Label).unwrap();
        assert!((rsm.get(0, 1) - 1.0).abs() < 1e-6);
        assert!(rsm.get(0, 2).abs() < 1e-6);
        assert_eq!(rsm.key_boundaries(), vec![0, 2]);
    }

    #[test]
    fn zero_norm_reports_id() {
        let (a, z) = ([1.0, 0.0], [0.0, 0.0]);
        assert!(matches!(cosine_rsm(&[input(0, 0, &a), input(7, 0, &z)], SortKey::Label), Err(Error::ZeroNorm { id: 7 })));
        assert!(cosine_rsm(&[input(0, 0, &a)], SortKey::Label).is_err());
    }

    #[test]
    fn sorted_by_key_then_id() {
        let e = [1.0f32, 1.0];
        let xs = vec![input(3, 1, &e), input(1, 1, &e), input(2, 0, &e)];
        let rsm = cosine_rsm(&xs, SortKey::Label).unwrap();
        assert_eq!(rsm.order, vec![2, 1, 3]);
    }

    fn matrix(n: usize, f: impl Fn(usize, usize) -> f32) -> RsmMatrix {
        RsmMatrix {
            sort_key: SortKey::Label,
            order: (0..n as u64).collect(),
            keys: vec![0; n],
            values: (0..n * n).map(|k| f(k / n, k % n)).collect(),
        }
    }

    #[test]
    fn contrast_of_block_matrix() {
        let m = matrix(6, |i, j| if i / 3 == j / 3 { 1.0 } else { 0.0 });
        assert!((block_contrast(&m, &[0, 3]).unwrap() - 1.0).abs() < 1e-12);
        let c = matrix(6, |_, _| 0.4);
        assert!(block_contrast(&c, &[0, 3]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn degenerate_partitions_rejected() {
        let m = matrix(4, |_, _| 1.0);
        assert!(block_contrast(&m, &[0, 2, 2]).is_err());
        assert!(block_contrast(&m, &[0, 4]).is_err());
        assert!(block_contrast(&m, &[1, 2]).is_err());
        assert!(block_contrast(&m, &[0]).is_err());
    }

    proptest! {
        #[test]
        fn rsm_invariants(vals in proptest::collection::vec(0.1f32..5.0, 12), scale in 0.1f32..10.0) {
            let es: Vec<&[f32]> = vals.chunks(3).collect();
            let xs: Vec<_> = es.iter().enumerate().map(|(i, e)| input(i as u64, i % 2, e)).collect();
            let rsm = cosine_rsm(&xs, SortKey::Label).unwrap();
            let n = rsm.n();
            for i in 0..n {
                prop_assert!((rsm.get(i, i) - 1.0).abs() < 1e-6);
                for j in 0..n {
                    prop_assert_eq!(rsm.get(i, j), rsm.get(j, i));
                    prop_assert!((-1.0..=1.0).contains(&rsm.get(i, j)));
                }
            }
            // positive rescaling of one vector leaves the matrix unchanged
            let scaled: Vec<f32> = es[0].iter().map(|v| v * scale).collect();
            let mut ys = xs.clone();
            ys[0].embedding = &scaled;
            let other = cosine_rsm(&ys, SortKey::Label).unwrap();
            for (a, b) in rsm.values.iter().zip(&other.values) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
