use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dpssm_cli::weights;
use dpssm_core::degrade::synthetic_clean;
use dpssm_core::Tensor;
use serde_json::Value;
use tempfile::TempDir;

fn dpssm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpssm"))
        .args(args)
        .env_remove("DPSSM_THREADS")
        .output()
        .expect("spawn dpssm")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn write_inputs(dir: &Path, n: u64, size: usize) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        synthetic_clean(3, size, size, i).unwrap().write(&dir.join(format!("img{i}.ppm"))).unwrap();
    }
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            (path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap())
        })
        .collect()
}

#[test]
fn degrade_empty_dir_is_an_io_error() {
    let t = TempDir::new().unwrap();
    let empty = t.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = dpssm(&["degrade", "--in", p(&empty), "--out", p(&t.path().join("o"))]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no input images"));
}

#[test]
fn degrade_bad_config_is_a_config_error() {
    let t = TempDir::new().unwrap();
    write_inputs(&t.path().join("in"), 1, 16);
    let cfg = t.path().join("cfg.json");
    fs::write(&cfg, r#"{"degrade": {"recipes": [], "colour": 1}}"#).unwrap();
    let out = dpssm(&["degrade", "--config", p(&cfg), "--in", p(&t.path().join("in")), "--out", p(&t.path().join("o"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn identity_recipe_reproduces_inputs() {
    let t = TempDir::new().unwrap();
    let input = t.path().join("in");
    write_inputs(&input, 3, 24);
    let cfg = t.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"degrade": {"recipes": [{"label": "identity", "recipe": {"kind": "identity"}}], "count": 5}}"#,
    )
    .unwrap();
    let out_dir = t.path().join("o");
    let out = dpssm(&["degrade", "--config", p(&cfg), "--in", p(&input), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let inputs: Vec<Vec<u8>> = tree(&input).into_values().collect();
    let manifest: Value = serde_json::from_slice(&fs::read(out_dir.join("manifest.json")).unwrap()).unwrap();
    let samples = manifest["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 5);
    for s in samples {
        let clean = fs::read(out_dir.join(s["clean"].as_str().unwrap())).unwrap();
        let degraded = fs::read(out_dir.join(s["degraded"].as_str().unwrap())).unwrap();
        assert_eq!(clean, degraded);
        assert!(inputs.contains(&clean));
    }
}

#[test]
fn degrade_is_seed_deterministic() {
    let t = TempDir::new().unwrap();
    let input = t.path().join("in");
    write_inputs(&input, 2, 16);
    let run = |name: &str, seed: &str| {
        let dir = t.path().join(name);
        let out = dpssm(&["degrade", "--seed", seed, "--in", p(&input), "--out", p(&dir)]);
        assert_eq!(code(&out), 0);
        tree(&dir)
    };
    let a = run("a", "11");
    assert_eq!(a.len(), 2 * 7 * 3 + 1);
    assert_eq!(a, run("b", "11"));
    assert_ne!(a, run("c", "12"));
}

#[test]
fn restore_with_identity_weights() {
    let t = TempDir::new().unwrap();
    let w = t.path().join("w.dpmw");
    assert_eq!(code(&dpssm(&["init-weights", "--out", p(&w)])), 0);

    let img = t.path().join("in.ppm");
    synthetic_clean(3, 48, 40, 3).unwrap().write(&img).unwrap();
    let restored = t.path().join("out.ppm");
    let out = dpssm(&["restore", "--weights", p(&w), "--in", p(&img), "--out", p(&restored), "--metrics", p(&img)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(&img).unwrap(), fs::read(&restored).unwrap());
    let m = stdout_json(&out);
    assert_eq!(m["psnr"].as_f64().unwrap(), 100.0);
    assert!((m["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);

    let odd = t.path().join("odd.ppm");
    synthetic_clean(3, 44, 48, 3).unwrap().write(&odd).unwrap();
    let out = dpssm(&["restore", "--weights", p(&w), "--in", p(&odd), "--out", p(&restored)]);
    assert_eq!(code(&out), 5);

    let mut bytes = fs::read(&w).unwrap();
    bytes[0] = b'Q';
    let bad = t.path().join("bad.dpmw");
    fs::write(&bad, bytes).unwrap();
    let out = dpssm(&["restore", "--weights", p(&bad), "--in", p(&img), "--out", p(&restored)]);
    assert_eq!(code(&out), 4);

    let missing = t.path().join("missing.dpmw");
    let out = dpssm(&["restore", "--weights", p(&missing), "--in", p(&img), "--out", p(&restored)]);
    assert_eq!(code(&out), 3);
}

#[test]
fn weight_files_roundtrip_byte_identical() {
    let t = TempDir::new().unwrap();
    let w = t.path().join("w.dpmw");
    assert_eq!(code(&dpssm(&["init-weights", "--seed", "4", "--out", p(&w)])), 0);
    let first = fs::read(&w).unwrap();
    let params = weights::load(&w).unwrap();
    let again = t.path().join("again.dpmw");
    weights::save(&again, &params).unwrap();
    assert_eq!(first, fs::read(&again).unwrap());
    assert!(params.get("net.tail.w").unwrap().data().iter().all(|&v| v == 0.0));
}

fn csv_rows(out: &Output) -> Vec<Vec<String>> {
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn bench_scan_small() {
    let out = dpssm(&["bench-scan", "--L", "1,64", "--dinner", "4", "--N", "4", "--threads", "1,4"]);
    assert_eq!(code(&out), 0);
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 2 * 2 * 2);
    assert!(rows.iter().all(|r| r.len() == 8 && r[5] == "20"));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("scan_ratio=2 "), "{err}");

    let out = Command::new(env!("CARGO_BIN_EXE_dpssm"))
        .args(["bench-scan", "--L", "8", "--dinner", "2", "--N", "2"])
        .env("DPSSM_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(csv_rows(&out).iter().all(|r| r[3] == "3"));

    let out = Command::new(env!("CARGO_BIN_EXE_dpssm"))
        .args(["bench-scan", "--L", "8", "--dinner", "2", "--N", "2", "--threads", "2"])
        .env("DPSSM_THREADS", "3")
        .output()
        .unwrap();
    assert!(csv_rows(&out).iter().all(|r| r[3] == "2"));

    let out = Command::new(env!("CARGO_BIN_EXE_dpssm"))
        .args(["bench-scan", "--L", "8"])
        .env("DPSSM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn grad_check_seed_seven() {
    let t = TempDir::new().unwrap();
    let out = dpssm(&["grad-check", "--seed", "7", "--out", p(t.path())]);
    assert_eq!(code(&out), 0);
    let report = stdout_json(&out);
    assert!(report["passed"].as_bool().unwrap());
    let entries = report["entries"].as_array().unwrap();
    for e in entries.iter().filter(|e| e["check"] != "micro_net") {
        assert!(e["max_rel_err"].as_f64().unwrap() <= 1e-4, "{e}");
    }
    assert!(t.path().join("grad_check.json").exists());
}

#[test]
fn stats_delta_at_identity_init_is_label_blind() {
    let t = TempDir::new().unwrap();
    let out = dpssm(&["stats-delta", "--out", p(t.path())]);
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(t.path().join("delta_stats.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "degradation_label,layer_index,mean,p10,p50,p90");
    let mut per_layer: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut labels = Vec::new();
    for l in lines {
        let (label, rest) = l.split_once(',').unwrap();
        labels.push(label.to_string());
        per_layer.entry(rest.split(',').next().unwrap().to_string()).or_default().push(rest.to_string());
    }
    labels.dedup();
    assert_eq!(labels.len(), 7);
    for rows in per_layer.values() {
        assert!(rows.iter().all(|r| r == &rows[0]));
    }
}

#[test]
fn train_toy1d_zero_steps() {
    let t = TempDir::new().unwrap();
    let out = dpssm(&["train-toy1d", "--steps", "0", "--out", p(t.path())]);
    assert_eq!(code(&out), 0);
    let r = stdout_json(&out);
    assert_eq!(r["mse_modulated"], r["mse_fixed"]);
    let saved: Value = serde_json::from_slice(&fs::read(t.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(saved, r);
    assert!(t.path().join("delta_stats.csv").exists());
}

#[test]
fn overfit_zero_steps_is_the_input() {
    let t = TempDir::new().unwrap();
    let out = dpssm(&["overfit-2d", "--steps", "0", "--out", p(t.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = stdout_json(&out);
    assert!((r["initial_psnr"].as_f64().unwrap() - r["input_psnr"].as_f64().unwrap()).abs() <= 1e-9);
}

#[test]
fn failing_check_exits_one() {
    let t = TempDir::new().unwrap();
    let cfg = t.path().join("cfg.json");
    fs::write(&cfg, r#"{"toy": {"steps": 1, "eval_per_class": 2}}"#).unwrap();
    let out = dpssm(&["train-toy1d", "--config", p(&cfg), "--out", p(t.path())]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mse_reduction"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(code(&dpssm(&["grad-check", "--sede", "7"])), 2);
}

#[test]
fn roundtrip_through_the_library() {
    let mut p = dpssm_core::params::Params::new();
    p.insert("x", Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
    let bytes = weights::encode(&p).unwrap();
    assert_eq!(weights::decode(&bytes).unwrap(), p);
}
