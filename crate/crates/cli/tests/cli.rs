use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn qupel() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_qupel"));
    c.env_remove("QUPEL_SEED");
    c
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn run(config: &Path, out: &Path) -> Output {
    qupel()
        .args(["run", "--log-level", "warn", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn small_blobs(mode: &str, lambda_p: f64) -> Value {
    json!({
        "mode": mode,
        "dataset": {"kind": "blobs", "classes": 4, "dim": 3, "per_class": 25, "spread": 0.8},
        "model": {"kind": "mlp", "hidden": [5]},
        "partition": {"n_clients": 3, "k": 2},
        "hyper": {"eta1": 0.2, "eta2": 0.02, "steps": 40, "lambda_p": lambda_p, "tau": 4,
                  "lambda": {"kind": "linear", "slope": 0.001, "cap": 0.05},
                  "fine_tune_start": 30, "quant": {"sharpness": 8.0}},
        "centers": {"m": 4},
        "seed": 3
    })
}

#[test]
fn minimal_centralized_run_converges() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&configs().join("centralized_quadratic.json"), dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = read_json(&dir.path().join("summary.json"));
    assert!(summary["final_gap"].as_f64().unwrap() < 1e-6);
    for f in ["manifest.json", "metrics.jsonl", "summary.csv"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(csv.starts_with("client_id,bits,acc_fp_eval,acc_quantized\n0,1.0,"));
}

#[test]
fn missing_eta1_exits_2_naming_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = read_json(&configs().join("centralized_quadratic.json"));
    cfg["hyper"].as_object_mut().unwrap().remove("eta1");
    let path = write_config(dir.path(), "bad.json", &cfg);
    let out = run(&path, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eta1"));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"mode": "centralized",
                     "model": {"kind": "quadratic", "targets": [[0.1, 0.9]]},
                     "hyper": {"eta1": 5.0, "eta2": 0.0, "steps": 200,
                               "quant": {"sharpness": 0.0, "hard_limit": true}},
                     "centers": {"m": 2, "values": [0.0, 1.0]}});
    let path = write_config(dir.path(), "diverge.json", &cfg);
    let out = run(&path, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn zero_coupling_qupel_matches_local() {
    let dir = tempfile::tempdir().unwrap();
    let q = write_config(dir.path(), "q.json", &small_blobs("qupel", 0.0));
    let l = write_config(dir.path(), "l.json", &small_blobs("local", 0.0));
    assert_eq!(run(&q, &dir.path().join("q")).status.code(), Some(0));
    assert_eq!(run(&l, &dir.path().join("l")).status.code(), Some(0));
    let a = std::fs::read_to_string(dir.path().join("q/summary.csv")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("l/summary.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn manifest_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "q.json", &small_blobs("qupel", 0.3));
    assert_eq!(run(&cfg, &dir.path().join("a")).status.code(), Some(0));
    let manifest = dir.path().join("a/manifest.json");
    assert_eq!(run(&manifest, &dir.path().join("b")).status.code(), Some(0));
    let m1 = std::fs::read(dir.path().join("a/metrics.jsonl")).unwrap();
    let m2 = std::fs::read(dir.path().join("b/metrics.jsonl")).unwrap();
    assert!(!m1.is_empty());
    assert_eq!(m1, m2);
    assert_eq!(read_json(&manifest), read_json(&dir.path().join("b/manifest.json")));
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "q.json", &small_blobs("local", 0.0));
    let out = qupel()
        .env("QUPEL_SEED", "17")
        .args(["run", "--log-level", "warn", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(read_json(&dir.path().join("o/manifest.json"))["seed"], json!(17));
    assert_eq!(read_json(&dir.path().join("o/summary.json"))["seed"], json!(17));
}

#[test]
fn gradcheck_default_passes() {
    let out = qupel().arg("gradcheck").output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn gradcheck_detects_wrong_sign() {
    let out = qupel().args(["gradcheck", "--instances", "50", "--inject-wrong-sign"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL quadratic gradient"));
}

#[test]
fn gradcheck_tight_tolerance_fails() {
    let out = qupel().args(["gradcheck", "--instances", "50", "--tol", "1e-12"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("FAIL") && text.contains("tol=1.0e-12"), "{text}");
}

#[test]
fn compare_rejects_empty_modes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({"base": small_blobs("qupel", 0.1), "modes": [], "seeds": [0]});
    let mut base = cfg.clone();
    base["base"].as_object_mut().unwrap().remove("mode");
    let path = write_config(dir.path(), "c.json", &base);
    let out = qupel().args(["compare", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("modes"));
}

#[test]
fn compare_iid_favours_fedavg() {
    let dir = tempfile::tempdir().unwrap();
    let out = qupel()
        .args(["compare", "--log-level", "warn", "--config"])
        .arg(configs().join("compare_iid.json"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    let acc = |mode: &str| -> f64 {
        let line = csv.lines().find(|l| l.starts_with(mode)).unwrap();
        line.rsplit(',').next().unwrap().parse().unwrap()
    };
    assert!(csv.starts_with("mode,seed,avg_test_acc\n"));
    assert!(acc("fedavg") >= acc("local") - 0.02);
    let cmp = read_json(&dir.path().join("comparison.json"));
    assert!(cmp["verdict"].as_str().unwrap().starts_with("ordering fedavg > local"));
}

#[test]
fn committed_configs_run_when_shortened() {
    let dir = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        let mut cfg = read_json(&path);
        let is_compare = cfg.get("base").is_some();
        let target = if is_compare { &mut cfg["base"]["hyper"] } else { &mut cfg["hyper"] };
        target["steps"] = json!(20);
        if !target["fine_tune_start"].is_null() {
            target["fine_tune_start"] = json!(15);
        }
        if target["tau"].as_u64().unwrap_or(1) > 20 {
            target["tau"] = json!(10);
        }
        if is_compare {
            cfg["seeds"] = json!([0]);
        }
        let short = write_config(dir.path(), &name, &cfg);
        let sub = if is_compare { "compare" } else { "run" };
        let out = qupel()
            .args([sub, "--log-level", "warn", "--config"])
            .arg(&short)
            .arg("--out")
            .arg(dir.path().join(name.trim_end_matches(".json")))
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
