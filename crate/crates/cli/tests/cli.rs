use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn int4kv(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_int4kv"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .env_remove("INT4KV_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path).unwrap().lines().map(|l| l.split(',').map(str::to_owned).collect()).collect()
}

#[test]
fn selftest_passes() {
    let dir = TempDir::new().unwrap();
    let o = int4kv(dir.path(), &["selftest"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let checks: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("selftest.json")).unwrap()).unwrap();
    assert_eq!(checks.as_array().unwrap().len(), 4);
    assert!(String::from_utf8_lossy(&o.stdout).lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn full_precision_only_reports_zero_error() {
    let dir = TempDir::new().unwrap();
    let o = int4kv(dir.path(), &["bench-quant", "--methods", "fp", "--seeds", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = csv_rows(&dir.path().join("report.csv"));
    assert_eq!(rows[0], ["method", "kv_mse", "logit_rmse", "attn_out_rmse", "worst_channel_err", "seed"]);
    assert_eq!(rows.len(), 3);
    for r in &rows[1..] {
        assert_eq!(r[0], "fp");
        assert!(r[1..5].iter().all(|x| x.parse::<f64>().unwrap() == 0.0), "{r:?}");
    }
}

#[test]
fn method_matrix_emits_one_row_per_method() {
    let dir = TempDir::new().unwrap();
    let methods = "int4,bdr-16,bdr-64,bdr-128,km-c1,km-c16,km-c256,km-c2048,hessian+bdr-128,km-c16+bdr-128";
    let o = int4kv(dir.path(), &["bench-quant", "--methods", methods, "--seeds", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let names: Vec<String> = csv_rows(&dir.path().join("report.csv"))[1..].iter().map(|r| r[0].clone()).collect();
    assert_eq!(names, methods.split(',').collect::<Vec<_>>());
}

#[test]
fn bench_quant_is_reproducible() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for d in [&a, &b] {
        let o = int4kv(d.path(), &["--seed", "17", "bench-quant", "--methods", "int4,bdr-64,km-c16", "--seeds", "2"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["report.csv", "report.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn serve_sim_writes_one_row_per_concurrency() {
    let dir = TempDir::new().unwrap();
    let o = int4kv(dir.path(), &["serve-sim", "--concurrency", "1,4,8,16,32"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = csv_rows(&dir.path().join("summary.csv"));
    assert_eq!(rows[0].len(), 11);
    let conc: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(conc, ["1", "4", "8", "16", "32"]);
    assert_eq!(rows[3][10], "true");
    assert!(dir.path().join("traces/int4_bdr_c16.csv").exists());
}

#[test]
fn single_cluster_calibration_stores_the_mean() {
    let dir = TempDir::new().unwrap();
    let samples = dir.path().join("samples.json");
    let q: Vec<f64> = (0..8).map(|i| i as f64 * 0.25 - 1.0).collect();
    let k = [1.0, 2.0, 3.0, 4.0, 3.0, 2.0, 1.0, 0.0];
    let v = [0.5, 0.5, -0.5, -0.5, 1.5, 1.5, 2.5, 2.5];
    let m = |d: &[f64]| serde_json::json!({"rows": 2, "cols": 4, "data": d});
    let body = serde_json::json!({"layers": [{"queries": m(&q), "keys": m(&k), "values": m(&v)}]});
    fs::write(&samples, body.to_string()).unwrap();
    let config = dir.path().join("run.json");
    let layout = serde_json::json!({"num_q_heads": 1, "num_kv_heads": 1, "head_dim": 4, "rot_order": 4, "page_tokens": 16});
    let cfg = serde_json::json!({
        "schema_version": 1,
        "layout": layout,
        "synthetic": {"dim": 4, "num_kv_heads": 1, "num_q_heads": 1, "outlier_channels": []},
        "calibration": {"rotation_order": 1, "clusters": [1]}
    });
    fs::write(&config, cfg.to_string()).unwrap();
    let o = int4kv(dir.path(), &["--config", config.to_str().unwrap(), "calibrate", "--samples", samples.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let dump: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("calibration.json")).unwrap()).unwrap();
    let books = dump[0]["codebooks"].as_array().unwrap();
    assert_eq!(books.len(), 2);
    // An order-1 block rotation without signs leaves only the learned key
    // rotation; values stay unrotated.
    let r: Vec<f64> = dump[0]["learned"][0]["data"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let centroid = |i: usize| -> Vec<f64> {
        books[i]["centroids"]["data"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
    };
    let key = centroid(0);
    let key: Vec<f64> = (0..4).map(|i| (0..4).map(|j| key[j] * r[i * 4 + j]).sum()).collect();
    let mean = |x: &[f64]| (0..4).map(|i| (x[i] + x[4 + i]) / 2.0).collect::<Vec<_>>();
    for (got, want) in [(key, mean(&k)), (centroid(1), mean(&v))] {
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
    assert_eq!(books[1]["kind"], "value");
}

#[test]
fn empty_calibration_fails_with_its_own_code() {
    let dir = TempDir::new().unwrap();
    let samples = dir.path().join("empty.json");
    fs::write(&samples, r#"{"layers": []}"#).unwrap();
    let o = int4kv(dir.path(), &["calibrate", "--samples", samples.to_str().unwrap()]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert!(!dir.path().join("calibration.bin").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(&config, r#"{"schema_version": 1, "sed": 4}"#).unwrap();
    let o = int4kv(dir.path(), &["--config", config.to_str().unwrap(), "selftest"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("sed"));

    fs::write(&config, r#"{"schema_version": 2}"#).unwrap();
    assert_eq!(code(&int4kv(dir.path(), &["--config", config.to_str().unwrap(), "selftest"])), 2);
    assert_eq!(code(&int4kv(dir.path(), &["serve-sim", "--concurrency", "0"])), 2);
}

#[test]
fn infeasible_workload_exits_with_simulator_code() {
    let dir = TempDir::new().unwrap();
    let o = int4kv(dir.path(), &["serve-sim", "--budget-bytes", "4096", "--concurrency", "1"]);
    assert_eq!(code(&o), 10, "{}", stderr(&o));
}

#[test]
fn unknown_method_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let o = int4kv(dir.path(), &["bench-quant", "--methods", "bdr-3x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn output_dir_falls_back_to_environment() {
    let dir = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_int4kv"))
        .arg("selftest")
        .env("INT4KV_OUT_DIR", dir.path().join("from-env"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("from-env/selftest.json").exists());
}
