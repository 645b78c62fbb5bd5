//! The `ttshs` binary: commands, output formats and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const OK_CONFIG: &str = r#"{
  "model": {
    "dynamics": {"drift_offset": [1.0], "drift_matrix": [[-1.0]]},
    "timer_reset": {
      "cov_linear": [[0.5]],
      "timing": {"type": "phase_type", "branches": [{"p": 1.0, "m": 3, "k": 3.0}]}
    },
    "initial_state": [1.0]
  },
  "run": {"t_end": 2.0, "grid_points": 5, "paths": 3000, "seed": 3}
}"#;

struct Scratch(PathBuf);

impl Scratch {
    fn new(tag: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("ttshs-cli-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        Scratch(dir)
    }

    fn file(&self, name: &str, body: &str) -> PathBuf {
        let p = self.0.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn ttshs(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ttshs"));
    cmd.args(args);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn validate_accepts_good_config() {
    let dir = Scratch::new("validate");
    let cfg = dir.file("ok.json", OK_CONFIG);
    let out = ttshs(&["validate"], Some(&cfg));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("code,severity,message"));
}

#[test]
fn transient_csv_layout() {
    let dir = Scratch::new("transient");
    let cfg = dir.file("ok.json", OK_CONFIG);
    let out = ttshs(&["transient"], Some(&cfg));
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "time,mean_0,cov_00");
    assert_eq!(lines.len(), 6);
    let last: Vec<f64> = lines[5].split(',').map(|f| f.parse().unwrap()).collect();
    assert_eq!(last[0], 2.0);
    assert!((last[1] - 1.0).abs() < 1e-8);
}

#[test]
fn steady_json_has_both_engines() {
    let dir = Scratch::new("steady");
    let cfg = dir.file("ok.json", OK_CONFIG);
    let out = ttshs(&["steady", "--format", "json"], Some(&cfg));
    assert_eq!(out.status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(doc["command"], "steady");
    let rows = doc["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert!(row["time"].is_null());
        assert!((row["covariance"][0][0].as_f64().unwrap() - 0.25).abs() < 1e-9);
    }
}

#[test]
fn simulate_writes_to_file_with_standard_errors() {
    let dir = Scratch::new("simulate");
    let cfg = dir.file("ok.json", OK_CONFIG);
    let target = dir.0.join("out.csv");
    let out = ttshs(
        &["simulate", "--out", target.to_str().unwrap(), "--seed", "9"],
        Some(&cfg),
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).is_empty());
    let text = std::fs::read_to_string(&target).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "time,mean_0,cov_00,se_mean_0,se_cov_00"
    );
}

#[test]
fn compare_passes_on_reference() {
    let dir = Scratch::new("compare");
    let cfg = dir.file("ok.json", OK_CONFIG);
    let out = ttshs(&["compare"], Some(&cfg));
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("overall: PASS"));
}

#[test]
fn unknown_key_is_config_error() {
    let dir = Scratch::new("schema");
    let cfg = dir.file(
        "bad.json",
        &OK_CONFIG.replace("\"dynamics\"", "\"drfit\": 0, \"dynamics\""),
    );
    let out = ttshs(&["steady"], Some(&cfg));
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("SCHEMA_ERROR") && stderr(&out).contains("drfit"));
}

#[test]
fn malformed_json_reports_line() {
    let dir = Scratch::new("parse");
    let cfg = dir.file("bad.json", "{\n  \"model\": {\n    oops\n}");
    let out = ttshs(&["validate"], Some(&cfg));
    assert_eq!(out.status.code(), Some(3));
    assert!(
        stderr(&out).contains("PARSE_ERROR at line 3"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn missing_file_is_config_error() {
    let out = ttshs(&["validate"], Some(Path::new("/nonexistent/ttshs.json")));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unstable_drift() {
    let dir = Scratch::new("unstable");
    let cfg = dir.file("unstable.json", &OK_CONFIG.replace("[[-1.0]]", "[[1.0]]"));
    let steady = ttshs(&["steady"], Some(&cfg));
    assert_eq!(steady.status.code(), Some(4));
    assert!(stderr(&steady).contains("NOT_HURWITZ"));
    let validate = ttshs(&["validate"], Some(&cfg));
    assert_eq!(validate.status.code(), Some(3));
    assert!(stdout(&validate).contains("NOT_HURWITZ"));
    // transients do not need a stable drift
    assert_eq!(ttshs(&["transient"], Some(&cfg)).status.code(), Some(0));
}

#[test]
fn usage_errors() {
    assert_eq!(ttshs(&["frobnicate"], None).status.code(), Some(2));
    assert_eq!(ttshs(&["steady"], None).status.code(), Some(2));
    assert_eq!(
        ttshs(&["steady", "--config", "x", "--format", "xml"], None)
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn fit_timing_rewrites_config() {
    let dir = Scratch::new("fit");
    let cfg = dir.file("ok.json", OK_CONFIG);
    let out = ttshs(&["fit-timing", "--mean", "1", "--cv2", "0.4"], Some(&cfg));
    assert_eq!(out.status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let branches = doc["model"]["timer_reset"]["timing"]["branches"]
        .as_array()
        .unwrap();
    assert_eq!(branches.len(), 2);
    assert_eq!(branches[0]["m"], 2);

    let bad = ttshs(&["fit-timing", "--mean", "1", "--cv2=-1"], None);
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn gene_table() {
    let out = ttshs(&["gene", "--variant", "deterministic"], None);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let printed = text.lines().find(|l| l.contains("printed")).unwrap();
    let engine = text.lines().find(|l| l.contains("phase-type")).unwrap();
    let cv2 = |l: &str| l.split(',').nth(3).unwrap().parse::<f64>().unwrap();
    assert!((cv2(printed) - std::f64::consts::LN_2 / 20.0).abs() < 1e-12);
    assert!((cv2(engine) - 0.1 / std::f64::consts::LN_2).abs() < 1e-9);
}
