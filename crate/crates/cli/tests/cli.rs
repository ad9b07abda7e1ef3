use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const M1: &str = r#"{"rays": [
  {"id": "A", "weight": 0.5, "atoms": [[1, 0.5], [3, 0.5]]},
  {"id": "B", "weight": 0.5, "atoms": [[2, 1]]}
], "origin_mass": 0}"#;

const M2: &str = r#"{"rays": [
  {"id": "a", "weight": 1, "atoms": [[1, 1]]},
  {"id": "b", "weight": 1, "atoms": [[2, 1]]},
  {"id": "c", "weight": 1, "atoms": [[4, 1]]}
]}"#;

fn spec(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_walsh-embed")).args(args).env("WALSH_EMBED_THREADS", "2").output().unwrap()
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn validate_m1() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec(dir.path(), "m1.json", M1);
    let o = run(&["validate", "--spec", s.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["values"]["first_moment"], 2.0);
    assert_eq!(r["values"]["second_moment"], 4.5);
    assert_eq!(r["values"]["centered_kappa"], serde_json::json!([0.5, 0.5]));
}

#[test]
fn validation_failures() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec(dir.path(), "m1.json", M1);
    let s = s.to_str().unwrap();
    let o = run(&["validate", "--spec", s, "--kappa", "A=0.7,B=0.3"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("centering"));

    let full =
        spec(dir.path(), "k1.json", r#"{"rays": [{"id": "A", "weight": 1, "atoms": [[1, 1]]}], "origin_mass": 1}"#);
    assert_eq!(code(&run(&["validate", "--spec", full.to_str().unwrap()])), 3);

    let bad = spec(dir.path(), "bad.json", r#"{"rays": [{"id": "A""#);
    assert_eq!(code(&run(&["barrier", "--spec", bad.to_str().unwrap()])), 2);
    assert_eq!(code(&run(&["validate", "--spec", "/nonexistent/spec.json"])), 2);
    assert_eq!(code(&run(&["validate", "--spec", s, "--kappa", "A:0.5"])), 2);
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    (header, rows)
}

#[test]
fn barrier_tables() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec(dir.path(), "m2.json", M2);
    let out = dir.path().join("m2");
    assert_eq!(code(&run(&["barrier", "--spec", s.to_str().unwrap(), "--out", out.to_str().unwrap()])), 0);
    let (header, rows) = csv_rows(&out.join("barrier.csv"));
    assert_eq!(header, ["l", "a_a", "a_b", "a_c", "lambda"]);
    for row in rows.iter().filter(|r| r[0] > 0.0) {
        assert_eq!(&row[1..4], &[1.0, 2.0, 4.0]);
    }

    let s = spec(dir.path(), "m1.json", M1);
    let out = dir.path().join("m1");
    assert_eq!(code(&run(&["barrier", "--spec", s.to_str().unwrap(), "--out", out.to_str().unwrap()])), 0);
    let (_, rows) = csv_rows(&out.join("barrier.csv"));
    let step = -2.4 * 0.375f64.ln();
    // rows within rounding of the step are checked through the report below
    for row in rows.iter().filter(|r| r[0] > 0.0 && (r[0] - step).abs() > 1e-9) {
        assert_eq!(row[1], if row[0] < step { 3.0 } else { 1.0 }, "l = {}", row[0]);
        assert_eq!(row[2], 2.0);
    }
    let r = report(&out);
    assert!((r["values"]["l_breaks"][0].as_f64().unwrap() - step).abs() < 1e-12);
}

#[test]
fn embed_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec(dir.path(), "m1.json", M1);
    let mut outputs = Vec::new();
    for (i, threads) in ["1", "3", "1"].iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let o = run(&[
            "--threads",
            threads,
            "embed",
            "--spec",
            s.to_str().unwrap(),
            "--method",
            "dubins",
            "--depth",
            "2",
            "--paths",
            "1500",
            "--dt",
            "1e-3",
            "--seed",
            "5",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push((fs::read(out.join("samples.csv")).unwrap(), fs::read(out.join("report.json")).unwrap()));
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
    let r = report(&dir.path().join("run0"));
    assert_eq!(r["values"]["expected_tau"], 4.5);
    let header = String::from_utf8(outputs[0].0.clone()).unwrap();
    assert!(header.starts_with("ray_id,radius,tau,local_time,stopped\n"));
}

#[test]
fn embed_vallois_and_bad_params() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec(dir.path(), "m2.json", M2);
    let s = s.to_str().unwrap();
    let out = dir.path().join("v");
    let o = run(&[
        "embed",
        "--spec",
        s,
        "--method",
        "vallois",
        "--paths",
        "1500",
        "--dt",
        "1e-3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert!(r["checks"].as_array().unwrap().iter().all(|c| c["pass"] == true));
    assert_eq!(code(&run(&["embed", "--spec", s, "--method", "vallois", "--paths", "0"])), 2);
    assert_eq!(code(&run(&["embed", "--spec", s, "--method", "cubic"])), 2);
    assert_eq!(code(&run(&["embed", "--spec", s, "--method", "dubins", "--depth", "0", "--paths", "10"])), 2);
}

#[test]
fn compare_needs_a_cost() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec(dir.path(), "m1.json", M1);
    let s = s.to_str().unwrap();
    assert_eq!(code(&run(&["compare", "--spec", s, "--paths", "10"])), 2);
    let out = dir.path().join("c");
    let o = run(&[
        "compare",
        "--spec",
        s,
        "--psi",
        "sqrt",
        "--paths",
        "1500",
        "--dt",
        "1e-3",
        "--ui-set",
        "B",
        "--ui-grid",
        "1.25,2,3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (header, rows) = csv_rows(&out.join("ui.csv"));
    assert_eq!(header, ["x", "estimate", "std_err", "count_bound"]);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2][1], 0.0);
    assert_eq!(code(&run(&["compare", "--spec", s, "--psi", "exp", "--paths", "10", "--ui-set", "Z"])), 2);
}

#[test]
fn dual_check_reports_and_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec(dir.path(), "m1.json", M1);
    let s = s.to_str().unwrap();
    let out = dir.path().join("d");
    let o = run(&["dual-check", "--spec", s, "--paths", "100", "--dt", "1e-3", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert!(r["values"]["max_gap"].as_f64().unwrap() <= 0.02);
    let (header, _) = csv_rows(&out.join("certificate.csv"));
    assert_eq!(header, ["l", "delta", "A_A", "A_B"]);
    let (header, rows) = csv_rows(&out.join("g.csv"));
    assert_eq!(header, ["r", "G_A", "G_B"]);
    assert_eq!(rows[0][1], rows[0][2]);
    // a bound no path can meet is a tolerance failure
    let o = run(&["dual-check", "--spec", s, "--paths", "20", "--dt", "1e-3", "--gap-bound=-1"]);
    assert_eq!(code(&o), 4);
}
