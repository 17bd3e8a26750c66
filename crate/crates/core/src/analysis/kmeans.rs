use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Initialization {
    #[default]
    KMeansPlusPlus,
    /// `k` distinct points chosen uniformly.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub n_init: usize,
    pub max_iter: usize,
    #[serde(default)]
    pub init: Initialization,
}

impl KMeansConfig {
    pub fn new(k: usize) -> Self {
        Self { k, seed: 0, n_init: 5, max_iter: 1000, init: Initialization::KMeansPlusPlus }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    /// Cluster of every input point, in input order.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
}

impl ClusterAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == cluster).collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cent) in centroids.iter().enumerate() {
        let d = sq_dist(p, cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            WeightedIndex::new(&d2).expect("positive total weight").sample(rng)
        } else {
            // every remaining point coincides with a centroid
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
        centroids.push(points[next].clone());
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> ClusterAssignment {
    let (n, k, dim) = (points.len(), centroids.len(), points[0].len());
    let mut assignments = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        let mut inertia = 0.0;
        let mut dist = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
            dist[i] = d;
            inertia += d;
        }
        // Refill emptied clusters with the point farthest from its centroid.
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assignments[i]] > 1)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("k <= n leaves a donor cluster");
                counts[assignments[far]] -= 1;
                assignments[far] = c;
                counts[c] = 1;
                inertia -= dist[far];
                dist[far] = 0.0;
                centroids[c] = points[far].clone();
                changed = true;
            }
        }
        trace.push(inertia);
        if !changed || iterations >= max_iter {
            return ClusterAssignment { k, assignments, centroids, inertia, iterations, inertia_trace: trace };
        }
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &a) in points.iter().zip(&assignments) {
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for (c, s) in sums.into_iter().enumerate() {
            centroids[c] = s.into_iter().map(|v| v / counts[c] as f64).collect();
        }
    }
}

/// Lloyd's algorithm, best of `n_init` seeded restarts by inertia.
pub fn kmeans_fit<V: AsRef<[f32]>>(embeddings: &[V], cfg: &KMeansConfig) -> Result<ClusterAssignment> {
    if embeddings.is_empty() {
        return Err(Error::Empty("k-means needs at least one point".into()));
    }
    let n = embeddings.len();
    if cfg.k == 0 || cfg.k > n {
        return Err(invalid(format!("k = {} must be in 1..={n}", cfg.k)));
    }
    if cfg.n_init == 0 {
        return Err(invalid("n_init must be at least 1"));
    }
    let dim = embeddings[0].as_ref().len();
    if embeddings.iter().any(|e| e.as_ref().len() != dim) {
        return Err(invalid("embeddings differ in length"));
    }
    let points: Vec<Vec<f64>> = embeddings.iter().map(|e| e.as_ref().iter().map(|&v| v as f64).collect()).collect();
    let mut best: Option<ClusterAssignment> = None;
    for restart in 0..cfg.n_init {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(restart as u64);
        let init = match cfg.init {
            Initialization::KMeansPlusPlus => seed_plus_plus(&points, cfg.k, &mut rng),
            Initialization::Random => index::sample(&mut rng, n, cfg.k).into_iter().map(|i| points[i].clone()).collect(),
        };
        let fit = lloyd(&points, init, cfg.max_iter);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

/// Group makeup of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterComposition {
    pub cluster: usize,
    pub size: usize,
    /// Count per dense group index.
    pub group_counts: Vec<usize>,
    pub minority_fraction: f64,
}

/// Per-cluster group counts; `groups[i]` is the dense group of point `i`.
pub fn cluster_composition(assignment: &ClusterAssignment, groups: &[usize], minority: &[bool], n_groups: usize) -> Result<Vec<ClusterComposition>> {
    if groups.len() != assignment.assignments.len() || minority.len() != groups.len() {
        return Err(invalid("group annotations do not match the clustered points"));
    }
    let mut out: Vec<ClusterComposition> = (0..assignment.k)
        .map(|c| ClusterComposition { cluster: c, size: 0, group_counts: vec![0; n_groups], minority_fraction: 0.0 })
        .collect();
    let mut minority_counts = vec![0usize; assignment.k];
    for ((&c, &g), &m) in assignment.assignments.iter().zip(groups).zip(minority) {
        if g >= n_groups {
            return Err(invalid(format!("group index {g} out of range")));
        }
        out[c].size += 1;
        out[c].group_counts[g] += 1;
        minority_counts[c] += m as usize;
    }
    for (comp, m) in out.iter_mut().zip(minority_counts) {
        comp.minority_fraction = if comp.size > 0 { m as f64 / comp.size as f64 } else { 0.0 };
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub k: usize,
    pub assignment: ClusterAssignment,
    pub composition: Option<Vec<ClusterComposition>>,
}

/// Ground-truth annotations used only to summarize clusters.
pub struct GroupAnnotations<'a> {
    pub groups: &'a [usize],
    pub minority: &'a [bool],
    pub n_groups: usize,
}

/// Fits k-means for every `k` in `k_range`.
pub fn sweep_k<V: AsRef<[f32]>>(
    embeddings: &[V],
    k_range: &[usize],
    base: &KMeansConfig,
    annotations: Option<&GroupAnnotations<'_>>,
) -> Result<Vec<SweepEntry>> {
    if k_range.is_empty() {
        return Err(invalid("k range is empty"));
    }
    k_range
        .iter()
        .map(|&k| {
            let assignment = kmeans_fit(embeddings, &KMeansConfig { k, ..*base })?;
            let composition = annotations
                .map(|a| cluster_composition(&assignment, a.groups, a.minority, a.n_groups))
                .transpose()?;
            Ok(SweepEntry { k, assignment, composition })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let pts = vec![vec![0.0f32, 0.0], vec![1.0, 0.0], vec![0.0, 5.0], vec![3.0, 3.0]];
        let fit = kmeans_fit(&pts, &KMeansConfig::new(4)).unwrap();
        assert_eq!(fit.inertia, 0.0);
        let mut seen = fit.assignments.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn duplicate_points_with_k_equal_n() {
        let pts = vec![vec![1.0f32]; 3];
        let fit = kmeans_fit(&pts, &KMeansConfig::new(3)).unwrap();
        assert_eq!(fit.sizes(), vec![1, 1, 1]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let empty: Vec<Vec<f32>> = vec![];
        assert!(kmeans_fit(&empty, &KMeansConfig::new(1)).is_err());
        assert!(kmeans_fit(&[vec![1.0f32]], &KMeansConfig::new(2)).is_err());
        assert!(kmeans_fit(&[vec![1.0f32]], &KMeansConfig::new(0)).is_err());
        assert!(sweep_k(&[vec![1.0f32]], &[], &KMeansConfig::new(1), None).is_err());
    }

    #[test]
    fn inertia_never_increases_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f32>> = (0..300).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
        for init in [Initialization::KMeansPlusPlus, Initialization::Random] {
            let cfg = KMeansConfig { init, ..KMeansConfig::new(7) };
            let fit = kmeans_fit(&pts, &cfg).unwrap();
            for w in fit.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", fit.inertia_trace);
            }
            assert_eq!(fit, kmeans_fit(&pts, &cfg).unwrap());
            assert!(fit.sizes().iter().all(|&s| s > 0));
        }
    }

    #[test]
    fn sweep_reports_each_k_with_composition() {
        let pts: Vec<Vec<f32>> = (0..12).map(|i| vec![(i / 4) as f32 * 10.0, (i % 4) as f32 * 0.1]).collect();
        let groups: Vec<usize> = (0..12).map(|i| i / 4).collect();
        let minority: Vec<bool> = groups.iter().map(|&g| g == 2).collect();
        let ann = GroupAnnotations { groups: &groups, minority: &minority, n_groups: 3 };
        let out = sweep_k(&pts, &[2, 3, 4], &KMeansConfig::new(1), Some(&ann)).unwrap();
        assert_eq!(out.iter().map(|e| e.k).collect::<Vec<_>>(), vec![2, 3, 4]);
        let k3 = out[1].composition.as_ref().unwrap();
        assert_eq!(k3.iter().map(|c| c.size).sum::<usize>(), 12);
        assert!(k3.iter().any(|c| c.minority_fraction == 1.0 && c.size == 4));
    }
}
