use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rsprox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsprox")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let cfg = serde_json::json!({
        "name": "cli",
        "problem": {
            "kind": "sparse_pca_synthetic",
            "config": { "n": 30, "d": 8, "r": 2, "support": 2, "mu": 0.1 },
            "data_seed": 5
        },
        "optimizers": [
            { "optimizer": { "algorithm": "r_prox_sgd", "eta": 0.05,
                             "batch": { "anchor": "all", "inner": 5, "epoch": 5 } } },
            { "optimizer": { "algorithm": "r_prox_spb", "eta": 0.05,
                             "batch": { "anchor": "all", "inner": 5, "epoch": 5 } } }
        ],
        "seeds": [1, 2, 3],
        "budget": { "ifo": 300 }
    });
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    names
}

#[test]
fn run_writes_one_csv_per_run_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = rsprox(&["run", "--config", &cfg, "--out", a.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = rsprox(&["run", "--config", &cfg, "--out", b.to_str().unwrap(), "--parallel", "4"]);
    assert!(out.status.success());

    let files = csv_files(&a);
    assert_eq!(files.len(), 6);
    assert!(a.join("summary.json").exists());
    for f in &files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 6);
    assert!(summary["version"].is_string());
    assert_eq!(summary["config"]["seeds"], serde_json::json!([1, 2, 3]));
}

#[test]
fn seed_offset_shifts_every_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("o");
    let out = rsprox(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--seed-offset", "10"]);
    assert!(out.status.success());
    assert!(out_dir.join("r_prox_sgd_seed11.csv").exists());
    assert!(out_dir.join("r_prox_spb_seed13.csv").exists());
}

#[test]
fn metric_cadence_does_not_change_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(rsprox(&["run", "--config", &cfg, "--out", a.to_str().unwrap()]).status.success());
    assert!(rsprox(&["run", "--config", &cfg, "--out", b.to_str().unwrap(), "--metric-every", "3"]).status.success());
    let losses = |p: &Path| -> Vec<String> {
        fs::read_to_string(p).unwrap().lines().skip(1).map(|l| l.split(',').nth(2).unwrap().to_string()).collect()
    };
    let f = "r_prox_spb_seed2.csv";
    assert_eq!(losses(&a.join(f)), losses(&b.join(f)));
}

#[test]
fn malformed_config_gives_exit_code_2_and_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(&path, "{\"problem\": 1}").unwrap();
    let out = rsprox(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    let parsed: serde_json::Value = serde_json::from_str(err.trim_end()).unwrap();
    assert_eq!(parsed["error"], "config");
    assert_eq!(parsed["code"], 2);

    let missing = rsprox(&["run", "--config", dir.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn prox_oracle_reports_small_discrepancy() {
    let out = rsprox(&["prox-oracle", "--count", "24"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let field = text.split_whitespace().find_map(|w| w.strip_prefix("max_discrepancy=")).unwrap();
    assert!(field.parse::<f64>().unwrap() <= 1e-6);
}

#[test]
fn check_grad_and_synth() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = rsprox(&["check-grad", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["max_rel_err"].as_f64().unwrap() <= 1e-5);
    assert_eq!(report["entries"].as_array().unwrap().len(), 20);

    let data = dir.path().join("data");
    let out = rsprox(&["synth", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert!(out.status.success());
    let bytes = fs::read(data.join("data.rmat")).unwrap();
    assert_eq!(&bytes[..4], b"RMAT");
    assert_eq!(bytes.len(), 24 + 8 * 30 * 8);
}

#[test]
fn grid_emits_best_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("g");
    let out = rsprox(&["grid", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--parallel", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(out_dir.join("grid.csv").exists());
    assert!(out_dir.join("grid_best.json").exists());
}
