use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;
use mid_core::analysis::{default_window_size, rank_logits, select_intercepts, select_max_window, SortKey};
use mid_core::midt::Bundle;
use mid_core::mitigation::{ingest_group_manifest, read_group_manifest};
use mid_core::nncore::records_from_bundle;
use mid_pipeline::config::ExperimentConfig;
use mid_pipeline::reports::{montage_for_run, rsm_for_run, WindowKind};
use mid_pipeline::stages::{files, AwaitingTriage, Pipeline, WindowArtifact, SELECTION_FILE, SELECTION_SOURCE_FILE};
use mid_pipeline::store::{atomic_write, RunStore, StageRecord, StageState};
use mid_pipeline::sweep::run_sweep;
use mid_pipeline::{api, ENV_BIND, ENV_STORE};

#[derive(Parser)]
#[command(name = "mid", version, about = "Mid-logit spurious-correlation analysis and last-layer retraining")]
struct Cli {
    /// Run store directory.
    #[arg(long, env = ENV_STORE, default_value = "mid-store", global = true)]
    store: PathBuf,
    /// Experiment config (TOML). Defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunSel {
    /// Run ids such as b0.80-s0; all runs of the config when omitted.
    #[arg(long = "run")]
    runs: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RsmKey {
    Label,
    Spurious,
}

#[derive(Subcommand)]
enum Command {
    /// Sample training and test sets.
    GenData(RunSel),
    /// Train the ERM model.
    Train(RunSel),
    /// Train and evaluate every (bias, seed) cell and write the sweep report.
    Sweep,
    /// Embeddings and logits of the training set.
    Extract(RunSel),
    /// Similarity matrix of fair-test embeddings.
    Rsm {
        #[arg(long)]
        run: String,
        #[arg(long, value_enum, default_value = "label")]
        key: RsmKey,
        #[arg(long, default_value_t = 900)]
        n: usize,
    },
    /// Per-class intercept and max windows.
    Intercept(RunSel),
    /// Dispute filtering and k-means over the intercept set.
    Cluster(RunSel),
    /// Record cluster tags from a JSON file, or by the auto policy.
    Triage {
        #[arg(long)]
        run: String,
        /// Headless triage document; the config policy is used when omitted.
        #[arg(long)]
        selection: Option<PathBuf>,
    },
    /// Last-layer retraining on the tagged clusters.
    Retrain(RunSel),
    /// Evaluate ERM and, once retrained, the before/after group metrics.
    Eval(RunSel),
    /// PNG grid of one class window.
    Montage {
        #[arg(long)]
        run: String,
        #[arg(long, value_enum, default_value = "intercept")]
        kind: WindowKind,
        #[arg(long, default_value_t = 0)]
        class: usize,
        #[arg(long, default_value_t = 36)]
        limit: usize,
        #[arg(long, default_value_t = 6)]
        per_row: usize,
    },
    /// Serve the JSON API.
    Serve {
        #[arg(long, env = ENV_BIND, default_value = "127.0.0.1:8080")]
        bind: String,
    },
    /// Import an embeddings bundle computed elsewhere and select its windows.
    IngestEmbeddings {
        #[arg(long)]
        run: String,
        #[arg(long)]
        embeddings: PathBuf,
        /// Optional `id,y,s` CSV; prints the group counts of each window.
        #[arg(long)]
        groups: Option<PathBuf>,
        #[arg(long)]
        window: Option<usize>,
    },
    /// Summarize an `id,y,s` group manifest.
    IngestGroups {
        #[arg(long)]
        file: PathBuf,
    },
}

fn run_ids(cfg: &ExperimentConfig, sel: &RunSel) -> Vec<String> {
    if sel.runs.is_empty() {
        cfg.run_ids()
    } else {
        sel.runs.clone()
    }
}

/// Runs `f` on every selected run, continuing past failures.
fn each_run(cfg: &ExperimentConfig, sel: &RunSel, mut f: impl FnMut(&str) -> Result<()>) -> Result<()> {
    let mut failed = 0;
    for id in run_ids(cfg, sel) {
        if let Err(e) = f(&id) {
            error!("{id}: {e:#}");
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} run(s) failed");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<AwaitingTriage>()) {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let store = RunStore::open(&cli.store)?;
    let p = Pipeline::new(&store, &cfg);
    match cli.command {
        Command::GenData(sel) => each_run(&cfg, &sel, |id| p.stage_data(id).map(drop)),
        Command::Train(sel) => each_run(&cfg, &sel, |id| {
            p.stage_data(id)?;
            p.stage_train(id).map(drop)
        }),
        Command::Sweep => {
            let report = run_sweep(&store, &cfg)?;
            println!("{:>5} {:>6} {:>20} {:>20}", "bias", "seeds", "train (95% CI)", "test (95% CI)");
            for r in &report.rows {
                let fmt = |m: Option<mid_pipeline::sweep::MeanCi>| m.map_or("-".into(), |m| format!("{:.3} [{:.3}, {:.3}]", m.mean, m.lower, m.upper));
                println!("{:>5.2} {:>6} {:>20} {:>20}", r.bias, r.n_seeds, fmt(r.train), fmt(r.test));
            }
            if report.failed() > 0 {
                bail!("{} sweep cell(s) failed", report.failed());
            }
            Ok(())
        }
        Command::Extract(sel) => each_run(&cfg, &sel, |id| p.stage_extract(id).map(drop)),
        Command::Rsm { run, key, n } => {
            let key = match key {
                RsmKey::Label => SortKey::Label,
                RsmKey::Spurious => SortKey::SpuriousAttribute,
            };
            let s = rsm_for_run(&p, &run, key, n)?;
            println!("{run}: {} x {} matrix, block contrast {:.4} -> {}", s.n, s.n, s.contrast, s.matrix_file);
            Ok(())
        }
        Command::Intercept(sel) => each_run(&cfg, &sel, |id| p.stage_intercept(id).map(drop)),
        Command::Cluster(sel) => each_run(&cfg, &sel, |id| {
            p.stage_dispute(id)?;
            p.stage_cluster(id).map(drop)
        }),
        Command::Triage { run, selection } => {
            if let Some(path) = selection {
                let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                atomic_write(&store.artifact_path(&run, SELECTION_FILE), &bytes)?;
                atomic_write(&store.artifact_path(&run, SELECTION_SOURCE_FILE), b"headless\n")?;
            }
            p.stage_triage(&run).map(drop)
        }
        Command::Retrain(sel) => each_run(&cfg, &sel, |id| p.stage_retrain(id).map(drop)),
        Command::Eval(sel) => each_run(&cfg, &sel, |id| {
            p.stage_eval(id)?;
            if store.load_manifest(id)?.is_done("retrain") {
                p.stage_metrics(id)?;
            }
            Ok(())
        }),
        Command::Montage { run, kind, class, limit, per_row } => {
            let name = montage_for_run(&p, &run, kind, class, limit, per_row)?;
            println!("{}", store.artifact_path(&run, &name).display());
            Ok(())
        }
        Command::Serve { bind } => {
            let state = api::AppState::new(store.clone(), cfg.clone());
            tokio::runtime::Runtime::new()?.block_on(api::serve(state, &bind))
        }
        Command::IngestEmbeddings { run, embeddings, groups, window } => ingest_embeddings(&store, &run, &embeddings, groups.as_deref(), window),
        Command::IngestGroups { file } => {
            let summary = ingest_group_manifest(&file)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
    }
}

/// Stores the bundle as the run's extract artifact and writes the windows.
/// Runs created this way have no images, so only window statistics apply.
fn ingest_embeddings(store: &RunStore, run: &str, path: &std::path::Path, groups: Option<&std::path::Path>, window: Option<usize>) -> Result<()> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let records = records_from_bundle(&Bundle::read_from(&mut bytes.as_slice())?)?;
    let mut m = store.load_or_create(run)?;
    let d = store.write_artifact(run, files::EMBEDDINGS, &bytes)?;
    let input_digest = mid_pipeline::digest::sha256_hex(&bytes);
    m.stages.insert("extract".into(), StageRecord { state: StageState::Done, input_digest: input_digest.clone(), artifacts: [(files::EMBEDDINGS.to_string(), d)].into(), error: None });
    let window = window.unwrap_or_else(|| default_window_size(records.len()));
    let intercept = select_intercepts(&records, window, Default::default())?;
    let n_classes = records.first().map_or(0, |r| r.logits.len());
    let max_windows = (0..n_classes).map(|c| Ok(select_max_window(&rank_logits(&records, c)?, window))).collect::<Result<Vec<_>>>()?;
    let artifact = WindowArtifact { window, intercept, max_windows };
    let d = store.write_json(run, files::INTERCEPT, &artifact)?;
    m.stages.insert("intercept".into(), StageRecord { state: StageState::Done, input_digest, artifacts: [(files::INTERCEPT.to_string(), d)].into(), error: None });
    store.save_manifest(&m)?;
    println!("{run}: {} records, window {window}, intercept set {}", records.len(), artifact.intercept.selected.len());
    if let Some(g) = groups {
        let file = std::fs::File::open(g).with_context(|| format!("reading {}", g.display()))?;
        let (pairs, _) = read_group_manifest(std::io::BufReader::new(file))?;
        let by_id: std::collections::HashMap<u64, (usize, usize)> = pairs.into_iter().collect();
        let count = |ids: &[u64]| {
            let mut c = std::collections::BTreeMap::new();
            for id in ids {
                if let Some(k) = by_id.get(id) {
                    *c.entry(format!("y={} s={}", k.0, k.1)).or_insert(0usize) += 1;
                }
            }
            c
        };
        for c in 0..n_classes {
            println!("class {c} intercept {:?}", count(&artifact.intercept.per_class[c]));
            println!("class {c} max       {:?}", count(&artifact.max_windows[c]));
        }
    }
    Ok(())
}
