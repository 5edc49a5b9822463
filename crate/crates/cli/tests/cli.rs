use std::process::{Command, Output};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgp-bench"))
        .args(args)
        .output()
        .expect("binary runs")
}

const SMALL: &[&str] = &["--n", "150", "--ntest", "30", "--experts", "3", "--seed", "2", "--no-timings"];

fn with(extra: &[&str]) -> Vec<String> {
    SMALL.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(extra: &[&str]) -> Output {
    let args = with(extra);
    bench(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn csv_has_one_row_per_method() {
    let out = run(&["--methods", "poe,gpoe,npae,npae*(0.5)", "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,type,smse,msll,mae,train_s,predict_s");
    assert_eq!(lines.len(), 5);
    assert!(lines[3].starts_with("npae,D,"));
    assert!(lines[4].starts_with("npae*(0.5),D,"));
}

#[test]
fn reruns_are_byte_identical() {
    let a = run(&["--methods", "rbcm,grbcm,npae*"]);
    let b = run(&["--methods", "rbcm,grbcm,npae*"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let report = dgp_core::bench::report_from_json(std::str::from_utf8(&a.stdout).unwrap()).unwrap();
    assert_eq!(report.selection.unwrap().selected.len(), 3);
    assert_eq!(report.rows.len(), 3);
}

#[test]
fn writes_report_and_graph_files() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let graph = dir.path().join("omega.csv");
    let out = run(&[
        "--methods",
        "gpoe",
        "--out",
        report.to_str().unwrap(),
        "--dump-graph",
        graph.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    assert!(std::fs::read_to_string(&report).unwrap().contains("\"rows\""));
    assert_eq!(std::fs::read_to_string(&graph).unwrap().lines().count(), 3);
    let edges = std::fs::read_to_string(dir.path().join("omega.edges.csv")).unwrap();
    assert!(edges.starts_with("source,target,weight"));
}

#[test]
fn reads_delimited_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.txt");
    let mut text = String::from("a b y\n");
    for i in 0..80 {
        let a = i as f64 / 80.0;
        let b = ((i * 37) % 80) as f64 / 80.0;
        text.push_str(&format!("{a} {b} {}\n", (3.0 * a).sin() + b));
    }
    std::fs::write(&path, text).unwrap();
    let out = bench(&[
        "--data",
        path.to_str().unwrap(),
        "--experts",
        "2",
        "--methods",
        "fullgp,bcm",
        "--format",
        "csv",
        "--no-timings",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 3);
}

#[test]
fn config_errors_exit_nonzero() {
    assert!(!run(&["--alpha", "0"]).status.success());
    assert!(!run(&["--methods", "npae,nope"]).status.success());
    assert!(!run(&["--experts", "0"]).status.success());
    assert!(!bench(&["--data", "/definitely/missing.csv"]).status.success());
    let bad = run(&["--lambda=-1"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("lambda"));
}

#[test]
fn method_failures_do_not_fail_the_process() {
    let out = bench(&["--n", "60", "--ntest", "10", "--experts", "1", "--methods", "grbcm,poe", "--format", "csv"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("grbcm failed"));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("grbcm,CI,,,,"));
}
