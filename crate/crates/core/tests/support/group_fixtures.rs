//! Group-metric fixtures computed by hand.

#![allow(dead_code)]

use std::io::Write;

use mid_core::mitigation::GroupCounts;

/// Training counts (0,0) 6, (0,1) 2, (1,0) 1, (1,1) 1 and four test samples
/// per group with 4, 3, 1 and 2 correct. By hand: WGA 0.25, weighted mean
/// 0.6 + 0.15 + 0.025 + 0.05 = 0.825, overall 10/16.
pub fn four_group_fixture() -> (GroupCounts, Vec<usize>, Vec<(usize, usize)>) {
    let train = GroupCounts::from_pairs([(0, 0); 6].into_iter().chain([(0, 1); 2]).chain([(1, 0)]).chain([(1, 1)]));
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for (g, correct) in [((0, 0), 4), ((0, 1), 3), ((1, 0), 1), ((1, 1), 2)] {
        for i in 0..4 {
            truth.push(g);
            pred.push(if i < correct { g.0 } else { 1 - g.0 });
        }
    }
    (train, pred, truth)
}

/// `id,y,s` manifest with `n` rows per group.
pub fn write_manifest(rows: &[((usize, usize), usize)]) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "id,y,s").unwrap();
    let mut id = 0;
    for &((y, s), n) in rows {
        for _ in 0..n {
            writeln!(f, "{id},{y},{s}").unwrap();
            id += 1;
        }
    }
    f.flush().unwrap();
    f
}

/// Percentage rounded to one decimal.
pub fn pct(v: f64) -> f64 {
    (v * 1000.0).round() / 10.0
}

/// y: 0 non-blonde, 1 blonde; s: 0 female, 1 male.
pub const CELEBA_GROUPS: [((usize, usize), usize); 4] = [((0, 0), 71629), ((0, 1), 66874), ((1, 0), 22880), ((1, 1), 1387)];
