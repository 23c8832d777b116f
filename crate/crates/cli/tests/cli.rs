use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn convreg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convreg")).current_dir(dir).args(args).output().expect("binary runs")
}

/// `key=value` lines of a successful run.
fn fields(out: &Output) -> BTreeMap<String, String> {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

fn number(f: &BTreeMap<String, String>, key: &str) -> f64 {
    f[key].parse().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

#[test]
fn simulate_writes_rows_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let f = fields(&convreg(dir.path(), &["simulate", "--n", "3", "--customers", "200", "--seed", "4", "--out", "d.csv"]));
    assert_eq!(f["rows"], "3");
    let csv = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("x1,y\n"));
    let meta = std::fs::read_to_string(dir.path().join("d.meta.json")).unwrap();
    assert!(meta.contains("\"seed\":4") || meta.contains("\"seed\": 4"));
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.csv", "b.csv"] {
        fields(&convreg(dir.path(), &["simulate", "--n", "20", "--customers", "300", "--out", name]));
    }
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bad_arguments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = convreg(dir.path(), &["simulate", "--n", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = convreg(dir.path(), &["fit", "--data", "missing.csv", "--problem", "a", "--lambda", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = convreg(dir.path(), &["fit", "--data", "x.csv", "--problem", "a", "--lambda", "0", "--u", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_bound_gives_the_mean() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "d.csv", "x1,y\n0.1,1\n0.4,3\n0.6,2\n0.9,6\n");
    let f = fields(&convreg(dir.path(), &["fit", "--data", "d.csv", "--domain", "0,1", "--problem", "b", "--u", "0", "--out", "m.json"]));
    assert_eq!(f["estimator"], "B");
    assert!(number(&f, "grad_bound").abs() < 1e-6);
    fields(&convreg(dir.path(), &["eval", "--model", "m.json", "--grid", "3", "--out", "e.csv"]));
    let eval = std::fs::read_to_string(dir.path().join("e.csv")).unwrap();
    for line in eval.lines().skip(1) {
        let f: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((f - 3.0).abs() < 1e-5, "{line}");
    }
}

#[test]
fn capped_fit_is_no_steeper_than_least_squares() {
    let dir = tempfile::tempdir().unwrap();
    fields(&convreg(dir.path(), &["simulate", "--n", "40", "--customers", "500", "--out", "d.csv"]));
    let a = fields(&convreg(dir.path(), &["fit", "--data", "d.csv", "--problem", "a", "--lambda", "0", "--out", "a.json"]));
    let s = a["sse"].clone();
    let c = fields(&convreg(
        dir.path(),
        &["fit", "--data", "d.csv", "--problem", "c", "--s", &s, "--s-method", "fixed", "--out", "c.json"],
    ));
    assert!(number(&c, "grad_bound") <= number(&a, "grad_bound") + 1e-6);
    assert!(number(&c, "sse") <= number(&a, "sse") + 1e-6);
}

#[test]
fn automatic_cap_on_the_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    fields(&convreg(dir.path(), &["simulate", "--n", "120", "--out", "d.csv"]));
    let f = fields(&convreg(dir.path(), &["fit", "--data", "d.csv", "--problem", "c", "--auto"]));
    assert!(number(&f, "sse") <= number(&f, "s_estimate") + 1e-6);
    assert!(dir.path().join("fit.json").exists());
}

#[test]
fn evaluation_against_the_truth() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "m.json",
        r#"{"domain":{"a":1.2,"b":1.3,"d":1},"grad_bound":0,"pieces":[{"anchor":[1.25],"value":2.0,"slope":[0.0]}]}"#,
    );
    write(dir.path(), "p.csv", "x1\n1.25\n");
    fields(&convreg(dir.path(), &["eval", "--model", "m.json", "--points", "p.csv", "--truth", "mm1", "--out", "e.csv"]));
    let eval = std::fs::read_to_string(dir.path().join("e.csv")).unwrap();
    let mut lines = eval.lines();
    assert_eq!(lines.next().unwrap(), "x1,f,g1,f0,grad_f0");
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((row[1] - 2.0).abs() < 1e-6);
    assert!((row[3] - 3.2).abs() < 1e-12);
    // derivative -(2x - 1) f0^2 at x = 1.25
    assert!((row[4] + 1.5 * 3.2 * 3.2).abs() < 1e-9);
}

#[test]
fn experiment_outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["e1", "e2"] {
        let out = convreg(
            dir.path(),
            &["experiment", "--n-list", "10", "--reps", "2", "--customers", "200", "--seed", "3", "--out", name],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut files: Vec<_> = std::fs::read_dir(dir.path().join("e1")).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert!(!files.is_empty());
    for name in files {
        let a = std::fs::read(dir.path().join("e1").join(&name)).unwrap();
        let b = std::fs::read(dir.path().join("e2").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?}");
    }
}
