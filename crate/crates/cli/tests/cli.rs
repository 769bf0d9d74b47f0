use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use set_transport::model::{save_checkpoint, SeTformer, SeTformerConfig};
use set_transport::{Matrix, Rng};

fn bin(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_set-transport"))
        .args(args)
        .current_dir(dir)
        .env_remove("SET_TRANSPORT_THREADS")
        .output()
        .expect("binary runs")
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

const TINY: &str = r#"{
    "preset": "needle",
    "model": {
        "input": {"kind": "sequence", "len": 8, "dim": 4},
        "base_channels": 8, "heads": [1], "m": [4],
        "sinkhorn": {"iterations": 20},
        "nystrom": {"k": 6, "fit_samples": 20}
    },
    "training": {"steps": 6, "batch_size": 8, "eval_every": 1},
    "data": {"kind": "needle", "train": 40, "test": 10, "seq_len": 8, "vocab_dim": 4}
}"#;

#[test]
fn verify_filter_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["verify", "--filter", "ky", "--out", "v"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("v/verify_report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["suites"], serde_json::json!(["ky"]));
    assert!(dir.path().join("v/effective_config.json").exists());

    let out = bin(&["verify", "--filter", "nope"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = bin(&["verify", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sign_flip_mutant_fails_the_bound_suite() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["verify", "--mutant", "sign-flip", "--filter", "bound"], dir.path());
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));
    assert!(text(&out).contains("FAIL bound"));
}

#[test]
fn verify_config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.json"), r#"{"bound_triples": "lots"}"#).unwrap();
    let out = bin(&["verify", "--config", "c.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("/bound_triples"), "{}", text(&out));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["bench", "--n", "32,64", "--m", "4", "--d", "8", "--reps", "2", "--out", "b"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let csv = fs::read_to_string(dir.path().join("b/bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "mechanism,n,m,d,reps,median_seconds,mads,multiply_adds");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("set,32,4,8,2,"));
    assert!(lines[2].starts_with("dpsa,32,4,8,2,"));
    assert!(dir.path().join("b/bench_machine.json").exists());
    let out = bin(&["bench", "--reps", "0"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_is_reproducible_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    for (out_dir, threads) in [("a", "1"), ("b", "3")] {
        let out = bin(&["train", "--config", "tiny.json", "--out", out_dir, "--threads", threads], dir.path());
        assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    }
    let a = fs::read(dir.path().join("a/metrics.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/metrics.csv")).unwrap());
    assert_eq!(fs::read(dir.path().join("a/model.setf")).unwrap(), fs::read(dir.path().join("b/model.setf")).unwrap());
    let eff: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a/effective_config.json")).unwrap()).unwrap();
    assert_eq!(eff["model"]["blocks"], serde_json::json!([1]));
    assert!(dir.path().join("a/summary.json").exists());

    let out = bin(
        &["export-attention", "--checkpoint", "a/model.setf", "--config", "tiny.json", "--sample", "3", "--out", "e"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let plan = fs::read_to_string(dir.path().join("e/plan_layer0.csv")).unwrap();
    assert_eq!(plan.lines().count(), 1 + 8 * 4);
    assert!(plan.lines().skip(1).all(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap() >= 0.0));

    let out = bin(
        &["export-attention", "--checkpoint", "a/model.setf", "--config", "tiny.json", "--sample", "3", "--layer", "9"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_config_errors_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"preset": "needle", "training": {"steps": "ten"}}"#).unwrap();
    let out = bin(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("/training/steps"), "{}", text(&out));
    let out = bin(&["train"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = bin(&["train", "--preset", "nope"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

fn one_layer_checkpoint(dir: &Path, len: usize, m: usize, positional: bool) {
    let mut cfg = SeTformerConfig::sequence(len, 3, 2);
    cfg.base_channels = 4;
    cfg.heads = vec![1];
    cfg.m = vec![m];
    cfg.nystrom.k = 4;
    cfg.positional.enabled = positional;
    let mut model = SeTformer::build(cfg, 1).unwrap();
    let mut rng = Rng::new(2);
    let inputs: Vec<Matrix> = (0..8).map(|_| Matrix::from_fn(len, 3, |_, _| rng.normal())).collect();
    model.fit_features(&inputs, 1).unwrap();
    save_checkpoint(&model, dir.join("m.setf")).unwrap();
    let csv: String = (0..len).map(|_| format!("{},{},{}\n", rng.normal(), rng.normal(), rng.normal())).collect();
    fs::write(dir.join("x.csv"), csv).unwrap();
}

#[test]
fn single_token_plan_is_one() {
    let dir = tempfile::tempdir().unwrap();
    one_layer_checkpoint(dir.path(), 1, 1, true);
    let out = bin(&["export-attention", "--checkpoint", "m.setf", "--input", "x.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let plan = fs::read_to_string(dir.path().join("plan_layer0.csv")).unwrap();
    assert_eq!(plan, "i,j,value\n1,1,1.0\n");
}

#[test]
fn unpenalized_rows_sum_to_the_source_weight() {
    let dir = tempfile::tempdir().unwrap();
    one_layer_checkpoint(dir.path(), 10, 5, false);
    let out =
        bin(&["export-attention", "--checkpoint", "m.setf", "--input", "x.csv", "--iterations", "500"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let marg = fs::read_to_string(dir.path().join("marginals_layer0.csv")).unwrap();
    let rows: Vec<f64> =
        marg.lines().filter(|l| l.starts_with("row,")).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| (r - 0.1).abs() <= 1e-6), "{rows:?}");
}
