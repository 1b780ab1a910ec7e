// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sae_lab(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sae-lab"))
        .arg("--config")
        .arg(config)
        .arg("--deterministic")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A tiny run without attribute calibration.
fn write_config(dir: &Path, out_dir: &Path, extra: &str) -> std::path::PathBuf {
    let text = format!(
        r#"{{
  "schema_version": 1,
  "seed": 5,
  "out_dir": {out:?},
  "data": {{"vision": {{"n_train": 24, "n_val": 12, "n_test": 12, "target_attribute_group_accuracy": null}}, "vocab_size": 16}},
  "sae": {{"layers": [1]}},
  "train": {{"total_steps": 30, "warmup_steps": 5, "expansion_factor": 2, "batch_size": 64}},
  "steer": {{"feature_subset": 4, "n_images": 4, "sweep_top": 1, "sweep": {{"strengths": [0.0, 10.0]}}}},
  "suppress": {{"tau_points": 3, "random_seeds": 2}}{extra}
}}"#,
        out = out_dir.to_str().unwrap()
    );
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn output_hashes(manifest: &Path) -> Vec<(String, String)> {
    let v: Value = serde_json::from_slice(&std::fs::read(manifest).unwrap()).unwrap();
    v["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| (o["path"].as_str().unwrap().to_string(), o["sha256"].as_str().unwrap().to_string()))
        .collect()
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = tmp.path().join(name);
        let cfg = write_config(tmp.path(), &out_dir, "");
        let out = sae_lab(&cfg, &["gen-data"]);
        assert!(out.status.success(), "{}", stderr(&out));
        runs.push(output_hashes(&out_dir.join("manifest_gen_data.json")));
    }
    assert_eq!(runs[0], runs[1]);
    let shards = runs[0].iter().filter(|(p, _)| p.ends_with(".shard")).count();
    assert_eq!(shards, 4 * 3, "one shard per layer per split");
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"schema_version": 1, "model": {"d_modle": 8}}"#).unwrap();
    let out = sae_lab(&cfg, &["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("d_modle"), "{}", stderr(&out));
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let cfg = write_config(tmp.path(), &run, "");
    let ok = |args: &[&str]| {
        let out = sae_lab(&cfg, args);
        assert!(out.status.success(), "{args:?}: {}", stderr(&out));
        String::from_utf8_lossy(&out.stdout).into_owned()
    };
    ok(&["gen-data"]);

    // Missing checkpoints are named.
    let out = sae_lab(&cfg, &["suppress"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("topk_layer1.ckpt"), "{}", stderr(&out));

    let out = sae_lab(&cfg, &["train-sae", "--resume", "old.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("not supported"));

    let summary = ok(&["train-sae", "--variant", "topk"]);
    assert!(summary.contains("final EV") && summary.contains("mean L0"), "{summary}");
    let log = std::fs::read_to_string(run.join("sae/topk_layer1_train.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 30, "one row per step");
    ok(&["train-sae", "--variant", "vanilla"]);

    ok(&["eval", "--self-check"]);
    let grid = std::fs::read_to_string(run.join("eval/topk_layer1_test_per_patch.csv")).unwrap();
    let cells: usize = grid.lines().map(|l| l.split(',').count()).sum();
    assert_eq!(cells, 4 * 4);

    ok(&["eval", "--fixture", "identity"]);
    let report: Value = serde_json::from_slice(&std::fs::read(run.join("eval/identity_layer1_test.json")).unwrap()).unwrap();
    assert!((report["explained_variance"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!((report["ce"]["ce_recovered_pct"].as_f64().unwrap() - 100.0).abs() < 1e-6);

    ok(&["steer"]);
    let hist = std::fs::read_to_string(run.join("steer/topk_layer1_hist_features.csv")).unwrap();
    let edges: Vec<f64> = hist
        .lines()
        .skip(2)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    let ratios: Vec<f64> = edges.windows(2).map(|w| w[1] / w[0]).collect();
    assert!(ratios.windows(2).all(|r| (r[0] - r[1]).abs() < 1e-9), "log-spaced edges");
    let scores = std::fs::read_to_string(run.join("steer/topk_scores.csv")).unwrap();
    assert_eq!(scores.lines().filter(|l| l.starts_with("feature,")).count(), 4);

    let md = ok(&["suppress", "--variant", "vanilla"]);
    assert!(md.contains("| baseline |"));
    assert!(md.contains("| Seeds |"));
    assert!(run.join("manifest_suppress_vanilla.json").exists());
}

#[test]
fn empty_strengths_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"schema_version": 1, "steer": {"sweep": {"strengths": []}}}"#).unwrap();
    assert_eq!(sae_lab(&cfg, &["steer"]).status.code(), Some(2));
}
