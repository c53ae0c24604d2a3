use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use morrey_lab::io::read_scalar_lattice;
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_morrey-lab"))
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    p
}

fn run(args: &[&str]) -> (i32, String) {
    let out = bin().args(args).output().expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].to_string()).collect()
}

fn classify_config(out: &Path) -> Value {
    json!({
        "command": "classify",
        "field": { "kind": "hardy", "dim": 3, "delta": 0.5 },
        "q": [1.2, 1.5, 2.0, 3.0],
        "sampling": { "r_min": 0.125, "levels": 3, "anchor_extent": 1, "anchor_step": 0.25 },
        "output": out,
    })
}

fn solve_config(out: &Path, delta: f64, lambda: Vec<f64>) -> Value {
    json!({
        "command": "solve",
        "field": { "kind": "hardy", "dim": 3, "delta": delta },
        "grid": { "dim": 3, "half_width": 1.0, "dx": 0.25, "t0": 0.0, "t1": 0.5, "dt": 0.0625 },
        "source": { "kind": "gaussian", "amplitude": 1.0, "width": 0.5, "time_power": 1 },
        "lambda": lambda,
        "level": 1000.0,
        "probes": 16,
        "output": out,
    })
}

#[test]
fn classify_writes_monotone_morrey_estimates() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "c.json", &classify_config(&out));
    let (code, err) = run(&["classify", cfg.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let values: Vec<f64> = column(&out.join("classify.csv"), "value").iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(values.len(), 4);
    assert!(values.windows(2).all(|w| w[1] >= w[0]), "{values:?}");
    assert!(out.join("manifest.json").is_file());
    assert!(out.join("data_dictionary.csv").is_file());
}

#[test]
fn unknown_field_is_a_schema_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = classify_config(&tmp.path().join("run"));
    v["surplus"] = json!(1);
    let cfg = write_config(tmp.path(), "c.json", &v);
    let (code, err) = run(&["classify", cfg.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("surplus"), "{err}");
}

#[test]
fn wrong_subcommand_for_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &classify_config(&tmp.path().join("run")));
    assert_eq!(run(&["solve", cfg.to_str().unwrap()]).0, 2);
}

#[test]
fn strong_drift_is_refused_by_the_gate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "s.json", &solve_config(&out, 100.0, vec![1.0]));
    let (code, err) = run(&["solve", cfg.to_str().unwrap()]);
    assert_eq!(code, 3, "{err}");
    assert!(err.contains("gate refused"), "{err}");
    assert!(out.join("gate_refused.json").is_file());
    assert!(!out.join("u.f64").exists());
}

#[test]
fn solve_writes_a_readable_lattice_and_monotone_gate_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "s.json", &solve_config(&out, 0.5, vec![1.0, 4.0, 16.0, 64.0]));
    let (code, err) = run(&["solve", cfg.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(column(&out.join("gate_sweep.csv"), "decreasing"), vec!["true"; 4]);
    let u = read_scalar_lattice(&out.join("u.f64")).unwrap();
    assert_eq!(u.grid.dim, 3);
    assert!(u.values.iter().all(|v| v.is_finite()));
    assert!(u.values.iter().any(|v| *v != 0.0));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = write_config(tmp.path(), "s.json", &solve_config(&a, 0.5, vec![4.0]));
    assert_eq!(run(&["solve", cfg.to_str().unwrap()]).0, 0);
    assert_eq!(run(&["solve", cfg.to_str().unwrap(), "--output", b.to_str().unwrap()]).0, 0);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 6);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn run_directory_is_owned_by_one_configuration() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "s.json", &solve_config(&out, 0.5, vec![4.0]));
    assert_eq!(run(&["solve", cfg.to_str().unwrap()]).0, 0);
    let other = write_config(tmp.path(), "o.json", &solve_config(&out, 0.25, vec![4.0]));
    assert_eq!(run(&["solve", other.to_str().unwrap()]).0, 2);
}

#[test]
fn report_refuses_empty_and_mixed_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(run(&["report", empty.to_str().unwrap()]).0, 2);

    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ca = write_config(tmp.path(), "a.json", &classify_config(&a));
    let cb = write_config(tmp.path(), "b.json", &solve_config(&b, 0.5, vec![4.0]));
    assert_eq!(run(&["classify", ca.to_str().unwrap()]).0, 0);
    assert_eq!(run(&["solve", cb.to_str().unwrap()]).0, 0);
    assert_eq!(run(&["report", b.to_str().unwrap()]).0, 0);
    assert!(b.join("report_summary.csv").is_file());
    assert!(b.join("report.txt").is_file());

    fs::copy(a.join("classify.csv"), b.join("classify.csv")).unwrap();
    let (code, err) = run(&["report", b.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("mixed"), "{err}");
}

#[test]
fn simulate_writes_krylov_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let v = json!({
        "command": "simulate",
        "field": { "kind": "hardy", "dim": 3, "delta": 0.5 },
        "x0": [0.2, 0.0, 0.0],
        "t_end": 0.5,
        "dt": 0.002,
        "paths": 2000,
        "seed": 5,
        "level": 10.0,
        "krylov": { "level": 10.0, "windows": [0.02, 0.04, 0.08, 0.16] },
        "martingale_checkpoints": [0.25, 0.5],
        "tail_radii": [0.5, 1.0],
        "output": out,
    });
    let cfg = write_config(tmp.path(), "m.json", &v);
    let (code, err) = run(&["simulate", cfg.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let h = column(&out.join("krylov.csv"), "h");
    assert_eq!(h.len(), 4);
    let gamma: f64 = column(&out.join("krylov.csv"), "fit_gamma")[0].parse().unwrap();
    assert!(gamma > 0.0 && gamma < 1.5, "{gamma}");
    assert!(out.join("martingale.csv").is_file());
}

#[test]
fn verify_morrey_suite_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("v");
    let (code, err) = run(&["verify", "--suite", "morrey", "--output", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(column(&out.join("verify.csv"), "pass"), vec!["true"; 4]);
}
