use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn fmtc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmtc"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr_line(out: &Output) -> String {
    let s = String::from_utf8_lossy(&out.stderr).to_string();
    assert_eq!(
        s.trim_end().lines().count(),
        1,
        "expected one line, got {s:?}"
    );
    s
}

fn gen(dir: &Path) {
    ok(&fmtc(&[
        "gen",
        "--out",
        dir.to_str().unwrap(),
        "--samples",
        "40",
        "--seed",
        "5",
    ]));
}

fn edit_config(dir: &Path, edit: impl FnOnce(&mut serde_json::Map<String, Value>)) {
    let path = dir.join("config.json");
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    edit(v.as_object_mut().unwrap());
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

const TRACE_FIELDS: [&str; 11] = [
    "round",
    "objective",
    "lagrangian_start",
    "lagrangian",
    "primal_residual",
    "dual_residual",
    "w_stationarity",
    "orthogonality",
    "w_change",
    "f_change",
    "client_acc",
];

#[test]
fn gen_run_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let config = dir.path().join("config.json");
    ok(&fmtc(&["run", "--config", config.to_str().unwrap()]));

    let out = dir.path().join("out");
    for t in 0..3 {
        for name in [
            format!("W_{t}.csv"),
            format!("F_{t}.csv"),
            format!("centroids_{t}.csv"),
            format!("labels_{t}.txt"),
        ] {
            assert!(out.join("model").join(&name).exists(), "{name}");
        }
    }

    let trace = fs::read_to_string(out.join("trace.jsonl")).unwrap();
    let mut prev_round = 0;
    for line in trace.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        let obj = rec.as_object().unwrap();
        let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        keys.sort_unstable();
        let mut want = TRACE_FIELDS.to_vec();
        want.sort_unstable();
        assert_eq!(keys, want);
        let round = obj["round"].as_u64().unwrap();
        assert!(round > prev_round);
        prev_round = round;
        let (start, end) = (
            obj["lagrangian_start"].as_f64().unwrap(),
            obj["lagrangian"].as_f64().unwrap(),
        );
        assert!(end <= start + 1e-9);
    }
    assert!(prev_round > 0);

    let metrics: Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["converged"], Value::Bool(true));
    assert_eq!(metrics["rounds"].as_u64().unwrap(), prev_round);
    assert!(metrics["mean_in_sample_acc"].as_f64().unwrap() > 0.95);

    let eval = fmtc(&["eval", "--config", config.to_str().unwrap()]);
    ok(&eval);
    let report: Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(report["mean_in_sample_acc"], metrics["mean_in_sample_acc"]);
    assert_eq!(
        report["mean_out_of_sample_acc"],
        metrics["mean_out_of_sample_acc"]
    );
    assert_eq!(report["clients"].as_array().unwrap().len(), 3);
    assert_eq!(report["clients"][0]["test_samples"].as_u64().unwrap(), 8);
}

#[test]
fn zero_rounds_gives_valid_outputs_and_empty_trace() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    edit_config(dir.path(), |c| {
        c.insert("max_rounds".into(), 0.into());
    });
    ok(&fmtc(&[
        "run",
        "--config",
        dir.path().join("config.json").to_str().unwrap(),
    ]));
    let out = dir.path().join("out");
    assert_eq!(fs::read_to_string(out.join("trace.jsonl")).unwrap(), "");
    let metrics: Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["rounds"], 0);
    assert_eq!(metrics["final_objective"], Value::Null);
    assert!(out.join("model/W_2.csv").exists());
}

#[test]
fn repeated_runs_write_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let config = dir.path().join("config.json");
    ok(&fmtc(&["run", "--config", config.to_str().unwrap()]));
    let first = fs::read(dir.path().join("out/trace.jsonl")).unwrap();
    ok(&fmtc(&["run", "--config", config.to_str().unwrap()]));
    assert_eq!(first, fs::read(dir.path().join("out/trace.jsonl")).unwrap());
}

#[test]
fn missing_data_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    fs::remove_file(dir.path().join("client_1.csv")).unwrap();
    let out = fmtc(&[
        "run",
        "--config",
        dir.path().join("config.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).contains("client_1.csv"));
}

#[test]
fn schema_violations_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let config = dir.path().join("config.json");
    edit_config(dir.path(), |c| {
        c.insert("alpah".into(), 1.into());
    });
    let out = fmtc(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).contains("alpah"));

    gen(dir.path());
    edit_config(dir.path(), |c| {
        c.insert("test_fraction".into(), 0.9.into());
    });
    let out = fmtc(&["run", "--config", config.to_str().unwrap()]);
    assert!(stderr_line(&out).contains("test_fraction"));

    gen(dir.path());
    edit_config(dir.path(), |c| {
        c.remove("schema_version");
    });
    let out = fmtc(&["run", "--config", config.to_str().unwrap()]);
    assert!(stderr_line(&out).contains("schema_version"));
}

#[test]
fn unknown_flag_is_rejected() {
    let out = fmtc(&["gen", "--outt", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).contains("--outt"));
    let out = fmtc(&["gen"]);
    assert!(stderr_line(&out).contains("--out"));
}

#[test]
fn eval_without_a_model_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let out = fmtc(&[
        "eval",
        "--config",
        dir.path().join("config.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).contains("split.json"));
}
