use std::path::Path;
use std::process::{Command, Output};

fn sscn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sscn")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const SYNTHETIC: &str = r#"{
  "data": {"synthetic": {"ambient_dim": 10, "cluster_dims": [2, 2, 2], "points_per_cluster": [40, 40, 40]}},
  "block_dim": 2,
  "rotation": {"iters": 500}
}"#;

#[test]
fn generate_writes_a_reloadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SYNTHETIC);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&sscn(&["generate", "--config", &cfg, "--seed", "1", "--out", a.to_str().unwrap()]));
    ok(&sscn(&["generate", "--config", &cfg, "--seed", "2", "--out", b.to_str().unwrap()]));
    let (da, meta) = sscn::dataio::read_dataset(&a.join("dataset.bin")).unwrap();
    let (db, _) = sscn::dataio::read_dataset(&b.join("dataset.bin")).unwrap();
    assert_eq!(da.len(), 120);
    assert_eq!(meta["seed"], 1);
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(side["fingerprint"], meta["fingerprint"]);
    assert_ne!(
        sscn::dataio::data_fingerprint(da.x()),
        sscn::dataio::data_fingerprint(db.x())
    );
}

#[test]
fn generate_rejects_impossible_spec() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"data": {"synthetic": {"ambient_dim": 3, "cluster_dims": [2, 2], "points_per_cluster": [5, 5]}}}"#,
    );
    let out = sscn(&["generate", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("exceeds ambient_dim"));
}

#[test]
fn unknown_config_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"lamda": 5}"#);
    let out = sscn(&["train", "--config", &cfg]);
    assert!(!out.status.success());
}

#[test]
fn train_cluster_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SYNTHETIC);
    let run = dir.path().join("run");
    let text = ok(&sscn(&[
        "train", "--config", &cfg, "--seed", "0", "--seed", "1", "--seed", "2", "--out", run.to_str().unwrap(),
    ]));
    assert!(text.contains("over 3 seeds"), "{text}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("run_report.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"].as_array().unwrap().len(), 3);
    assert_eq!(report["aggregate"]["acc"]["mean"], 1.0);
    assert_eq!(report["aggregate"]["acc"]["std"], 0.0);

    // Clustering the training data again reproduces the in-sample labels.
    let data = dir.path().join("data");
    ok(&sscn(&["generate", "--config", &cfg, "--seed", "0", "--out", data.to_str().unwrap()]));
    let clustered = dir.path().join("clustered");
    ok(&sscn(&[
        "cluster",
        "--checkpoint",
        run.join("seed-1/model.bin").to_str().unwrap(),
        "--data",
        data.join("dataset.bin").to_str().unwrap(),
        "--out",
        clustered.to_str().unwrap(),
        "--batch-size",
        "7",
    ]));
    assert_eq!(
        std::fs::read_to_string(clustered.join("labels.csv")).unwrap(),
        std::fs::read_to_string(run.join("seed-1/labels.csv")).unwrap()
    );
    assert!(clustered.join("soft.csv").exists());

    let eval = ok(&sscn(&[
        "evaluate",
        "--labels",
        clustered.join("labels.csv").to_str().unwrap(),
        "--data",
        data.join("dataset.bin").to_str().unwrap(),
    ]));
    let m: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert_eq!(m["acc"], 1.0);
}

#[test]
fn cluster_rejects_wrong_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SYNTHETIC);
    let run = dir.path().join("run");
    ok(&sscn(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]));
    let other = write_config(
        dir.path(),
        r#"{"data": {"synthetic": {"ambient_dim": 12, "cluster_dims": [2, 2, 2], "points_per_cluster": [5, 5, 5]}}}"#,
    );
    let data = dir.path().join("data");
    ok(&sscn(&["generate", "--config", &other, "--out", data.to_str().unwrap()]));
    let out = sscn(&[
        "cluster",
        "--checkpoint",
        run.join("seed-0/model.bin").to_str().unwrap(),
        "--data",
        data.join("dataset.bin").to_str().unwrap(),
        "--out",
        dir.path().join("c").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("d_X = 10"));
}

#[test]
fn verify_passes_and_detects_faults() {
    let out = sscn(&["verify"]);
    let text = ok(&out);
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(report["passed"], true);
    let eq = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "closed_form_equivalence")
        .unwrap();
    assert!(eq["value"].as_f64().unwrap() <= 1e-8);

    let bad = sscn(&["verify", "--inject-fault"]);
    assert!(!bad.status.success());
    let report: serde_json::Value = serde_json::from_slice(&bad.stdout).unwrap();
    assert_eq!(report["passed"], false);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("closed_form_equivalence"));
}
