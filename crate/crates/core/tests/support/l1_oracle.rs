//! Brute-force optimum of the two-class L1 logistic objective and fixtures.

#![allow(dead_code)]

use mid_core::mitigation::Standardizer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Three classes separated along the first `informative` features; the rest is noise.
pub fn problem(n: usize, dim: usize, informative: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let c = i % 3;
        x.push((0..dim).map(|d| noise.sample(&mut rng) + if d < informative && d % 3 == c { 1.5 } else { 0.0 }).collect());
        y.push(c);
    }
    let std = Standardizer::fit(&x).unwrap();
    (std.apply_all(&x), y)
}

/// Two-class objective written on the logit difference `z = d.x + beta`.
/// For a fixed difference `d` the smallest `|w0| + |w1|` per feature is `|d|`,
/// so minimizing over `(d, beta)` gives the optimum of the full problem.
pub fn two_class_objective(x: &[Vec<f64>], y: &[usize], d: [f64; 2], beta: f64, lambda: f64) -> f64 {
    let mut total = 0.0;
    for (row, &label) in x.iter().zip(y) {
        let z = d[0] * row[0] + d[1] * row[1] + beta;
        let s = if label == 0 { z } else { -z };
        total += if s > 0.0 { (-s).exp().ln_1p() } else { -s + s.exp().ln_1p() };
    }
    total / x.len() as f64 + lambda * (d[0].abs() + d[1].abs())
}

/// Grid minimum over the box `[-8, 8]^3`, refined twice around the best
/// point. The objective is convex, so the refinement cannot leave the basin.
pub fn exhaustive_min(x: &[Vec<f64>], y: &[usize], lambda: f64) -> (f64, [f64; 3]) {
    let mut best = (f64::INFINITY, [0.0; 3]);
    let search = |center: [f64; 3], half: f64, step: f64, best: &mut (f64, [f64; 3])| {
        let n = (2.0 * half / step).round() as i64;
        for i in 0..=n {
            for j in 0..=n {
                for k in 0..=n {
                    let p = [center[0] - half + i as f64 * step, center[1] - half + j as f64 * step, center[2] - half + k as f64 * step];
                    let f = two_class_objective(x, y, [p[0], p[1]], p[2], lambda);
                    if f < best.0 {
                        *best = (f, p);
                    }
                }
            }
        }
    };
    search([0.0; 3], 8.0, 0.1, &mut best);
    search(best.1, 0.15, 0.01, &mut best);
    search(best.1, 0.015, 0.0005, &mut best);
    best
}

/// Twelve points in two shifted classes, two features.
pub fn tiny_instance() -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..12 {
        let label = i % 2;
        let shift = if label == 0 { 0.6 } else { -0.6 };
        x.push(vec![rng.random_range(-1.0..1.0) + shift, rng.random_range(-1.0..1.0)]);
        y.push(label);
    }
    (x, y)
}
