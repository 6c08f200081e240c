//! End-to-end tests of the `ecp` binary: every subcommand runs against a
//! small synthetic config, outputs are schema-valid JSON, and repeated runs
//! are byte-identical.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ecp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ecp"))
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ecp-cli-{name}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, name: &str, value: serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn ecp");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn grouped_source(n: usize) -> serde_json::Value {
    serde_json::json!({
        "kind": "grouped", "num_labels": 6, "num_groups": 3, "sharpness": 0.4, "n": n
    })
}

#[test]
fn gen_data_then_evaluate_is_deterministic() {
    let dir = tmp_dir("eval");
    let data_path = dir.join("task.ecd");
    let gen_cfg = write_config(
        &dir,
        "gen.json",
        serde_json::json!({ "task": grouped_source(600), "seed": 5, "out": data_path }),
    );
    run_ok(ecp().args(["gen-data", "--config"]).arg(&gen_cfg));
    assert!(data_path.exists());
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data_path.with_extension("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["n"], 600);

    let eval_cfg = write_config(
        &dir,
        "eval.json",
        serde_json::json!({
            "dataset": { "kind": "columnar", "path": data_path },
            "model": null,
            "score": { "kind": "THR_PROB", "jitter": 1e-6 },
            "alphas": [0.1, 0.2],
            "seeds": [1, 2, 3],
            "cal_fraction": 0.5,
            "out_dir": dir.join("eval-out")
        }),
    );
    run_ok(ecp().args(["evaluate", "--config"]).arg(&eval_cfg));
    let first = std::fs::read(dir.join("eval-out/report.json")).unwrap();
    let first_csv = std::fs::read(dir.join("eval-out/table.csv")).unwrap();

    run_ok(ecp().args(["evaluate", "--config"]).arg(&eval_cfg));
    assert_eq!(first, std::fs::read(dir.join("eval-out/report.json")).unwrap());
    assert_eq!(first_csv, std::fs::read(dir.join("eval-out/table.csv")).unwrap());

    // Uniform model: every set has all labels at alpha 0.1 with n large.
    let report: serde_json::Value =
        serde_json::from_str(&String::from_utf8(first).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 2);
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn bounds_rejects_alpha_at_least_half() {
    let dir = tmp_dir("bounds-reject");
    let cfg = write_config(
        &dir,
        "bounds.json",
        serde_json::json!({
            "dataset": grouped_source(200),
            "model": null,
            "score": { "kind": "THR_PROB", "jitter": 1e-6 },
            "alphas": [0.6],
            "delta": 0.05,
            "cal_fraction": 0.5,
            "seed": 1,
            "out_dir": dir.join("out")
        }),
    );
    let out = ecp().args(["bounds", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("0.5"), "stderr: {stderr}");
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn bounds_reports_are_consistent() {
    let dir = tmp_dir("bounds");
    let cfg = write_config(
        &dir,
        "bounds.json",
        serde_json::json!({
            "dataset": grouped_source(800),
            "model": null,
            "score": { "kind": "THR_PROB", "jitter": 1e-6 },
            "alphas": [0.05, 0.1],
            "delta": 0.05,
            "cal_fraction": 0.5,
            "seed": 3,
            "out_dir": dir.join("out")
        }),
    );
    run_ok(ecp().args(["bounds", "--config"]).arg(&cfg));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("out/report.json")).unwrap()).unwrap();
    for row in report.as_array().unwrap() {
        // Value equals the sum of its term breakdown.
        for method in ["dpi", "mb_fano", "simple_fano"] {
            let value = row[method]["value"].as_f64().unwrap();
            let total: f64 = row[method]["terms"].as_object().unwrap().values().map(|v| v.as_f64().unwrap()).sum();
            assert!((value - total).abs() < 1e-9);
        }
        // Exact-DPI never exceeds the cross-entropy.
        assert!(row["dpi_exact"].as_f64().unwrap() <= row["cross_entropy"].as_f64().unwrap() + 1e-9);
    }
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn calibrate_writes_threshold_json() {
    let dir = tmp_dir("cal");
    let cfg = write_config(
        &dir,
        "cal.json",
        serde_json::json!({
            "dataset": grouped_source(300),
            "model": null,
            "score": { "kind": "THR_PROB", "jitter": 1e-6 },
            "alpha": 0.1,
            "cal_fraction": 0.5,
            "seed": 2,
            "out": dir.join("calibration.json")
        }),
    );
    run_ok(ecp().args(["calibrate", "--config"]).arg(&cfg));
    let cal: ecp_core::conformal::Calibration =
        serde_json::from_str(&std::fs::read_to_string(dir.join("calibration.json")).unwrap()).unwrap();
    assert_eq!(cal.n, 150);
    assert_eq!(cal.alpha, 0.1);
    assert!(cal.q_hat.is_finite());
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn train_sideinfo_setsize_and_fed_train_run() {
    let dir = tmp_dir("pipeline");

    let train_cfg = write_config(
        &dir,
        "train.json",
        serde_json::json!({
            "dataset": { "kind": "gmm-circle", "num_labels": 4, "radius": 1.5, "var": 1.0, "n": 600 },
            "model_spec": { "layer_sizes": [2, 4], "activation": "RELU" },
            "loss": "FANO",
            "alpha_train": 0.1,
            "batch_size": 60,
            "lr": 0.1,
            "epochs": 3,
            "relax": { "steepness": 10.0, "temperature": 0.5, "swap_kind": "LOGISTIC" },
            "seed": 4,
            "out_dir": dir.join("train-out")
        }),
    );
    run_ok(ecp().args(["train", "--config"]).arg(&train_cfg));
    let model_text = std::fs::read_to_string(dir.join("train-out/model.json")).unwrap();
    let metrics = std::fs::read_to_string(dir.join("train-out/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    // Emitted files parse back into the typed core schemas.
    let model: ecp_core::training::Model = serde_json::from_str(&model_text).unwrap();
    assert_eq!(model.spec.num_labels(), 4);
    for line in metrics.lines() {
        let _: ecp_core::training::EpochMetrics = serde_json::from_str(line).unwrap();
    }

    let side_cfg = write_config(
        &dir,
        "side.json",
        serde_json::json!({
            "dataset": { "kind": "grouped", "num_labels": 12, "num_groups": 3, "sharpness": 0.35, "n": 1200 },
            "model": null,
            "side_model": { "kind": "table" },
            "score": { "kind": "THR_PROB", "jitter": 1e-6 },
            "alpha": 0.1,
            "availabilities": [0.0, 1.0],
            "seeds": [1, 2],
            "cal_fraction": 0.5,
            "mondrian": false,
            "out_dir": dir.join("side-out")
        }),
    );
    run_ok(ecp().args(["sideinfo", "--config"]).arg(&side_cfg));
    let side_report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("side-out/report.json")).unwrap()).unwrap();
    assert_eq!(side_report.as_array().unwrap().len(), 4);

    let setsize_cfg = write_config(
        &dir,
        "setsize.json",
        serde_json::json!({
            "dataset": grouped_source(1600),
            "model": null,
            "score": { "kind": "THR_PROB", "jitter": 1e-6 },
            "alphas": [0.05, 0.1],
            "k": 8,
            "kmeans_iters": 10,
            "cal_fraction": 0.5,
            "seed": 6,
            "out_dir": dir.join("setsize-out")
        }),
    );
    run_ok(ecp().args(["setsize", "--config"]).arg(&setsize_cfg));
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("setsize-out/report.json")).unwrap()).unwrap();
    for row in rows.as_array().unwrap() {
        assert!(row["simple_raw"].as_f64().unwrap() <= row["empirical_logsize"].as_f64().unwrap() + 1e-6);
    }

    let fed_cfg = write_config(
        &dir,
        "fed.json",
        serde_json::json!({
            "dataset": { "kind": "grouped", "num_labels": 6, "num_groups": 3, "sharpness": 0.4, "n": 900 },
            "model_spec": { "layer_sizes": [6, 6], "activation": "RELU" },
            "devices": 3,
            "dirichlet_conc": 1.0,
            "rounds": 2,
            "loss": "CE",
            "alpha_train": 0.1,
            "batch_size": 40,
            "lr": 0.2,
            "relax": { "steepness": 10.0, "temperature": 0.5, "swap_kind": "LOGISTIC" },
            "alpha_eval": 0.1,
            "heldout_n": 900,
            "seed": 7,
            "out_dir": dir.join("fed-out")
        }),
    );
    run_ok(ecp().args(["fed-train", "--config"]).arg(&fed_cfg));
    let fed_metrics = std::fs::read_to_string(dir.join("fed-out/metrics.jsonl")).unwrap();
    assert_eq!(fed_metrics.lines().count(), 2);
    let fed_report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("fed-out/report.json")).unwrap()).unwrap();
    assert!(fed_report["final_global"]["coverage"].as_f64().unwrap() > 0.8);

    // The trained checkpoint loads back as a model config input.
    let _model: serde_json::Value = serde_json::from_str(&model_text).unwrap();
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn repro_runs_a_fast_criterion() {
    let out = run_ok(ecp().args(["repro", "ordering-chain"]));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS: ordering-chain"), "stdout: {stdout}");
}

#[test]
fn repro_unknown_criterion_is_usage_error() {
    let out = ecp().args(["repro", "nonsense"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn parallel_evaluate_matches_serial() {
    let dir = tmp_dir("threads");
    let data_cfg = serde_json::json!({
        "dataset": grouped_source(400),
        "model": null,
        "score": { "kind": "THR_PROB", "jitter": 1e-6 },
        "alphas": [0.1],
        "seeds": [1, 2, 3, 4],
        "cal_fraction": 0.5,
        "out_dir": dir.join("serial")
    });
    let serial_cfg = write_config(&dir, "serial.json", data_cfg.clone());
    run_ok(ecp().args(["evaluate", "--config"]).arg(&serial_cfg).env("ECP_THREADS", "1"));

    let mut parallel = data_cfg;
    parallel["out_dir"] = serde_json::json!(dir.join("parallel"));
    let parallel_cfg = write_config(&dir, "parallel.json", parallel);
    run_ok(ecp().args(["evaluate", "--config"]).arg(&parallel_cfg).env("ECP_THREADS", "4"));

    assert_eq!(
        std::fs::read(dir.join("serial/report.json")).unwrap(),
        std::fs::read(dir.join("parallel/report.json")).unwrap()
    );
    std::fs::remove_dir_all(dir).ok();
}
