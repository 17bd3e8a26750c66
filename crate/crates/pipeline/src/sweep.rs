use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Result;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{parse_run_id, ExperimentConfig};
use crate::stages::Pipeline;
use crate::store::{atomic_write, RunStore};

pub const SWEEP_REPORT_FILE: &str = "sweep_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub run_id: String,
    pub bias: f64,
    pub seed: u64,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Mean with a normal-approximation 95% interval over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// `mean ± 1.96 · s / sqrt(n)` with the sample standard deviation `s`;
/// a single value has zero width.
pub fn mean_ci(values: &[f64]) -> Option<MeanCi> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let half = if values.len() < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        1.96 * var.sqrt() / n.sqrt()
    };
    Some(MeanCi { mean, lower: mean - half, upper: mean + half })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bias: f64,
    pub n_seeds: usize,
    pub train: Option<MeanCi>,
    pub test: Option<MeanCi>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config_digest: String,
    pub cells: Vec<SweepCell>,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn failed(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }

    pub fn row(&self, bias: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| (r.bias - bias).abs() < 1e-9)
    }
}

fn worker_count(cfg: &ExperimentConfig) -> usize {
    match cfg.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
}

/// Trains and evaluates every (bias, seed) cell. A failing cell is recorded
/// in its manifest and in the report; the other cells still run.
pub fn run_sweep(store: &RunStore, cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let ids = cfg.run_ids();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<SweepCell>>> = Mutex::new(vec![None; ids.len()]);
    let pipeline = Pipeline::new(store, cfg);
    std::thread::scope(|scope| {
        for _ in 0..worker_count(cfg).min(ids.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(run_id) = ids.get(i) else { break };
                let (bias, seed) = parse_run_id(run_id).expect("config run ids parse");
                let cell = match pipeline.run_erm(run_id) {
                    Ok(e) => {
                        info!("{run_id}: train {:.4} test {:.4}", e.train_accuracy, e.test_accuracy);
                        SweepCell { run_id: run_id.clone(), bias, seed, train_accuracy: Some(e.train_accuracy), test_accuracy: Some(e.test_accuracy), error: None }
                    }
                    Err(e) => {
                        warn!("{run_id}: {e:#}");
                        SweepCell { run_id: run_id.clone(), bias, seed, train_accuracy: None, test_accuracy: None, error: Some(format!("{e:#}")) }
                    }
                };
                results.lock().expect("results lock")[i] = Some(cell);
            });
        }
    });
    let cells: Vec<SweepCell> = results.into_inner().expect("results lock").into_iter().map(|c| c.expect("every cell ran")).collect();
    let rows = cfg
        .data
        .biases
        .iter()
        .map(|&bias| {
            let of_bias: Vec<&SweepCell> = cells.iter().filter(|c| c.bias == bias).collect();
            let train: Vec<f64> = of_bias.iter().filter_map(|c| c.train_accuracy).collect();
            let test: Vec<f64> = of_bias.iter().filter_map(|c| c.test_accuracy).collect();
            SweepRow { bias, n_seeds: test.len(), train: mean_ci(&train), test: mean_ci(&test) }
        })
        .collect();
    let report = SweepReport { config_digest: cfg.digest(), cells, rows };
    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    atomic_write(&store.root().join(SWEEP_REPORT_FILE), &bytes)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_conventions() {
        let one = mean_ci(&[0.7]).unwrap();
        assert_eq!((one.lower, one.mean, one.upper), (0.7, 0.7, 0.7));
        let two = mean_ci(&[1.0, 3.0]).unwrap();
        let half = 1.96 * 2f64.sqrt() / 2f64.sqrt();
        assert!((two.upper - 2.0 - half).abs() < 1e-12);
        assert!(mean_ci(&[]).is_none());
    }
}
