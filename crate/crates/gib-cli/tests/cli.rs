//! Binary-level checks: subcommands, artifacts on disk, exit codes.

use std::process::Command;

fn gib() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gib"))
}

#[test]
fn run_produces_artifacts_and_reruns_from_manifest() {
    let tmp = tempfile::TempDir::new().unwrap();
    let spec_path = tmp.path().join("spec.json");
    std::fs::write(
        &spec_path,
        serde_json::json!({
            "name": "cli-smoke",
            "corpus": "synthetic",
            "synthetic_count": 40,
            "synthetic_seed": 3,
            "folds": 2,
            "epochs": 1,
            "batch_size": 8,
            "hidden_dim": 4,
            "inner_steps": 1,
            "sweep_axis": "snr_db",
            "sweep_values": [5.0],
            "workers": 1
        })
        .to_string(),
    )
    .unwrap();

    let out_root = tmp.path().join("out");
    let status = gib()
        .args(["run"])
        .arg(&spec_path)
        .arg("--output-root")
        .arg(&out_root)
        .status()
        .unwrap();
    assert!(status.success());
    let exp_dir = out_root.join("cli-smoke");
    let metrics = exp_dir.join("metrics.csv");
    let manifest = exp_dir.join("manifest.json");
    assert!(metrics.is_file());
    assert!(manifest.is_file());
    assert!(exp_dir.join("figure.svg").is_file());

    // rerun from the manifest alone, into a fresh root
    let first = std::fs::read(&metrics).unwrap();
    let out2 = tmp.path().join("out2");
    let status = gib()
        .args(["run"])
        .arg(&manifest)
        .arg("--output-root")
        .arg(&out2)
        .status()
        .unwrap();
    assert!(status.success());
    let second = std::fs::read(out2.join("cli-smoke/metrics.csv")).unwrap();
    assert_eq!(first, second, "manifest rerun diverged");
}

#[test]
fn invalid_spec_exits_two() {
    let tmp = tempfile::TempDir::new().unwrap();
    let spec_path = tmp.path().join("bad.json");
    std::fs::write(
        &spec_path,
        r#"{"corpus":"synthetic","sweep_axis":"snr_db","sweep_values":[5.0,1.0]}"#,
    )
    .unwrap();
    let status = gib().args(["run"]).arg(&spec_path).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn missing_corpus_exits_three() {
    let tmp = tempfile::TempDir::new().unwrap();
    let spec_path = tmp.path().join("missing.json");
    std::fs::write(
        &spec_path,
        serde_json::json!({
            "corpus": "tudataset",
            "tudataset_path": tmp.path().join("nowhere"),
            "tudataset_name": "NOPE",
            "sweep_axis": "snr_db",
            "sweep_values": [5.0]
        })
        .to_string(),
    )
    .unwrap();
    let status = gib().args(["run"]).arg(&spec_path).status().unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn gen_synthetic_writes_parseable_flat_files() {
    let tmp = tempfile::TempDir::new().unwrap();
    let out = tmp.path().join("synth");
    let status = gib()
        .args(["gen-synthetic"])
        .arg(&out)
        .args(["--n", "20", "--seed", "5", "--name", "SMOKE"])
        .status()
        .unwrap();
    assert!(status.success());
    let corpus = gib_core::dataset::parse_tudataset(&out, "SMOKE").unwrap();
    assert_eq!(corpus.graphs.len(), 20);
    let direct = gib_core::dataset::generate_synthetic(20, 5).unwrap();
    for (a, b) in corpus.graphs.iter().zip(&direct.graphs) {
        assert_eq!(a.adjacency, b.adjacency);
        assert_eq!(a.features, b.features);
        assert_eq!(a.label, b.label);
    }
}
