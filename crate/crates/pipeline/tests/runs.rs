mod common;

use std::process::Command;

use common::{dir_digests, tiny_config, RUN};
use mid_core::mitigation::{ClusterTag, TriageSource};
use mid_pipeline::config::{OracleConfig, TriagePolicy};
use mid_pipeline::stages::{files, AwaitingTriage, Pipeline, SELECTION_FILE};
use mid_pipeline::store::{RunStore, MANIFEST_FILE};
use mid_pipeline::sweep::run_sweep;

fn store() -> (tempfile::TempDir, RunStore) {
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::open(dir.path()).unwrap();
    (dir, store)
}

#[test]
fn completed_stages_are_skipped_and_tampering_detected() {
    let (_d, store) = store();
    let cfg = tiny_config();
    let p = Pipeline::new(&store, &cfg);
    assert!(p.stage_train(RUN).is_err(), "train before data must fail");
    p.run_erm(RUN).unwrap();
    let snapshot = dir_digests(&store.run_dir(RUN));
    assert!(!p.stage_data(RUN).unwrap());
    assert!(!p.stage_train(RUN).unwrap());
    assert!(!p.stage_eval(RUN).unwrap());
    assert_eq!(dir_digests(&store.run_dir(RUN)), snapshot);

    let model = store.artifact_path(RUN, files::MODEL);
    let mut bytes = std::fs::read(&model).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&model, &bytes).unwrap();
    let m = store.load_manifest(RUN).unwrap();
    let err = p.load_checkpoint(&m, "train", files::MODEL, files::MODEL_SIDECAR).unwrap_err();
    assert!(format!("{err:#}").contains("digest mismatch"), "{err:#}");
    // the stage reruns and, being deterministic, restores the same bytes
    assert!(p.stage_train(RUN).unwrap());
    assert_eq!(dir_digests(&store.run_dir(RUN)), snapshot);
}

#[test]
fn manual_triage_waits_and_config_changes_rerun_downstream() {
    let (_d, store) = store();
    let mut cfg = tiny_config();
    let p = Pipeline::new(&store, &cfg);
    p.run_erm(RUN).unwrap();
    for s in [Pipeline::stage_extract, Pipeline::stage_intercept, Pipeline::stage_dispute, Pipeline::stage_cluster] {
        s(&p, RUN).unwrap();
    }
    let err = p.stage_triage(RUN).unwrap_err();
    assert!(err.is::<AwaitingTriage>());

    let sel = format!(r#"{{"run_id":"{RUN}","decisions":[{{"cluster":0,"tag":"Retrain"}},{{"cluster":1,"tag":"Retrain"}},{{"cluster":2,"tag":"Retrain"}}]}}"#);
    std::fs::write(store.artifact_path(RUN, SELECTION_FILE), sel).unwrap();
    let (before, after) = p.run_mid(RUN).unwrap();
    assert!(after.worst_group_accuracy.is_finite() && before.worst_group_accuracy.is_finite());
    let m = store.load_manifest(RUN).unwrap();
    let decision: mid_core::mitigation::TriageDecision = store.read_json(&m, "triage", files::TRIAGE).unwrap();
    assert_eq!(decision.tags, vec![ClusterTag::Retrain; 3]);
    assert_eq!(decision.source, TriageSource::Headless);

    cfg.retrain.rng_seed = 9;
    let p = Pipeline::new(&store, &cfg);
    assert!(!p.stage_train(RUN).unwrap());
    assert!(!p.stage_triage(RUN).unwrap());
    assert!(p.stage_retrain(RUN).unwrap());
    assert!(p.stage_metrics(RUN).unwrap());
}

#[test]
fn always_agree_with_auto_triage_completes() {
    let (_d, store) = store();
    let mut cfg = tiny_config();
    cfg.oracle = OracleConfig::AlwaysAgree;
    cfg.triage.policy = TriagePolicy::Auto;
    let p = Pipeline::new(&store, &cfg);
    p.run_mid(RUN).unwrap();
    let m = store.load_manifest(RUN).unwrap();
    let d: mid_core::mitigation::DisputeOutcome = store.read_json(&m, "dispute", files::DISPUTE).unwrap();
    assert!(d.disputed.is_empty());
    let w: mid_pipeline::stages::WindowArtifact = store.read_json(&m, "intercept", files::INTERCEPT).unwrap();
    assert_eq!(d.kept, w.intercept.selected);
}

#[test]
fn single_cell_sweep_and_failures() {
    let (_d, store) = store();
    let mut cfg = tiny_config();
    let report = run_sweep(&store, &cfg).unwrap();
    assert_eq!(report.rows.len(), 1);
    let t = report.rows[0].test.unwrap();
    assert_eq!((t.lower, t.upper), (t.mean, t.mean));
    let manifest = std::fs::read(store.artifact_path(RUN, MANIFEST_FILE)).unwrap();
    run_sweep(&store, &cfg).unwrap();
    assert_eq!(std::fs::read(store.artifact_path(RUN, MANIFEST_FILE)).unwrap(), manifest);

    // a broken cell is reported while the others still run
    cfg.data.seeds = vec![1, 2];
    std::fs::create_dir_all(store.run_dir("b0.70-s2")).unwrap();
    std::fs::write(store.artifact_path("b0.70-s2", MANIFEST_FILE), b"not json").unwrap();
    let report = run_sweep(&store, &cfg).unwrap();
    assert_eq!(report.failed(), 1);
    assert_eq!(report.rows[0].n_seeds, 1);
    assert!(store.root().join(mid_pipeline::sweep::SWEEP_REPORT_FILE).is_file());
}

#[test]
fn cli_exit_codes() {
    let (d, _store) = store();
    let mid = env!("CARGO_BIN_EXE_mid");
    let bad = d.path().join("bad.toml");
    std::fs::write(&bad, "schema_version = 2\nbogus = 1\n").unwrap();
    let out = Command::new(mid).arg("--store").arg(d.path()).arg("--config").arg(&bad).arg("sweep").output().unwrap();
    assert!(!out.status.success());

    let groups = d.path().join("groups.csv");
    std::fs::write(&groups, "id,y,s\n0,0,0\n1,0,1\n2,1,1\n").unwrap();
    let out = Command::new(mid).arg("--store").arg(d.path()).args(["ingest-groups", "--file"]).arg(&groups).output().unwrap();
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["n_samples"], 3);

    let out = Command::new(mid).arg("--store").arg(d.path()).args(["retrain", "--run", "b0.10-s0"]).output().unwrap();
    assert!(!out.status.success());
}
