//! Drives the binary through the full workflow: generate data, train,
//! evaluate, stream, check equivalence, and benchmark.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dualform"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn dualform");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");

    // small dataset
    let spec = serde_json::json!({
        "h": 16, "w": 16, "duration_days": 160.0, "label_fraction": 0.8, "seed": 1
    });
    let spec_path = dir.path().join("spec.json");
    std::fs::write(&spec_path, serde_json::to_vec(&spec).unwrap()).unwrap();
    let out = run_ok(bin().args([
        "gen-data",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        data_dir.to_str().unwrap(),
        "--n",
        "6",
    ]));
    assert!(out.contains("manifest"));
    let manifest_path = data_dir.join("manifest.json");
    assert!(manifest_path.exists());

    // tiny training config
    let cfg = serde_json::json!({
        "task": "segmentation",
        "kind": "time_retention",
        "epochs": 2,
        "batch_size": 2,
        "learning_rate": 0.002,
        "max_seq_len": 5,
        "n_after": 2,
        "d_model": 8,
        "d_k": 8,
        "n_heads": 2,
        "n_layers": 1,
        "sse_base": 2,
        "val_every": 2
    });
    let cfg_path = dir.path().join("train.json");
    std::fs::write(&cfg_path, serde_json::to_vec(&cfg).unwrap()).unwrap();
    let ckpt_dir = dir.path().join("ckpt");
    let out = run_ok(bin().args([
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        manifest_path.to_str().unwrap(),
        "--out",
        ckpt_dir.to_str().unwrap(),
    ]));
    assert!(out.contains("checkpoint"));
    let ckpt = ckpt_dir.join("model.ckpt");
    assert!(ckpt.exists());
    let metrics = std::fs::read_to_string(ckpt_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["train_loss"].as_f64().unwrap().is_finite());
    }

    // eval on the test split prints machine-readable metrics
    let out = run_ok(bin().args([
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        manifest_path.to_str().unwrap(),
        "--split",
        "test",
        "--max-seq-len",
        "5",
    ]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["segmentation"]["accuracy"].as_f64().is_some(), "{out}");

    // stream one watched sample, emitting JSONL
    let watch = dir.path().join("watch");
    std::fs::create_dir_all(&watch).unwrap();
    let first_sample = data_dir.join("sample_000.mmts");
    std::fs::copy(&first_sample, watch.join("s.mmts")).unwrap();
    let emit = dir.path().join("out.jsonl");
    run_ok(bin().args([
        "stream",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--watch",
        watch.to_str().unwrap(),
        "--emit",
        emit.to_str().unwrap(),
    ]));
    let lines = std::fs::read_to_string(&emit).unwrap();
    assert!(lines.lines().count() >= 5, "stream emitted too few lines");
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["solar_pixels"].as_u64().is_some());
    }

    // equivalence check exits 0 within tolerance
    let out = run_ok(bin().args([
        "equiv-check",
        "--kind",
        "linear",
        "--trials",
        "10",
        "--tol",
        "1e-5",
    ]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v[0]["pass"], true);

    // impossible tolerance exits 2
    let status = bin()
        .args(["equiv-check", "--kind", "linear", "--trials", "5", "--tol", "1e-30"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // bench writes the CSV report
    let csv = dir.path().join("bench.csv");
    run_ok(bin().args([
        "bench",
        "--kinds",
        "linear,retention",
        "--lengths",
        "4,8",
        "--out",
        csv.to_str().unwrap(),
        "--reps",
        "5",
    ]));
    let content = std::fs::read_to_string(&csv).unwrap();
    assert!(content.starts_with("kind,t,mode,median_ns,state_bytes"));
    assert!(content.lines().count() > 4);
}

#[test]
fn gen_data_without_spec_uses_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("d");
    run_ok(bin().args(["gen-data", "--out", out_dir.to_str().unwrap(), "--n", "2"]));
    assert!(Path::new(&out_dir.join("manifest.json")).exists());
}
