#![allow(dead_code)]

use mid_pipeline::config::{ExperimentConfig, TriagePolicy};

/// A configuration small enough to run every stage in seconds.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.biases = vec![0.7];
    cfg.data.seeds = vec![1];
    cfg.data.n_train = 600;
    cfg.data.n_test = 300;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 50;
    cfg.intercept.window = Some(40);
    cfg.cluster.k_range = vec![2, 3];
    cfg.cluster.k = 3;
    cfg.retrain.n_repeats = 2;
    cfg.triage.policy = TriagePolicy::Manual;
    cfg.workers = 1;
    cfg
}

pub const RUN: &str = "b0.70-s1";

/// SHA-256 of every file in a run directory, by name.
pub fn dir_digests(dir: &std::path::Path) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.path().is_file())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), mid_pipeline::digest::sha256_hex(&std::fs::read(e.path()).unwrap())))
        .collect();
    out.sort();
    out
}
