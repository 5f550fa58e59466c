use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vmesh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vmesh"))
        .args(args)
        .output()
        .expect("spawn vmesh")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn body_rows(o: &Output) -> usize {
    stdout(o)
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .count()
}

#[test]
fn list_filters() {
    let all = vmesh(&["list-workloads"]);
    assert!(all.status.success());
    assert!(body_rows(&all) >= 15);

    let ty = vmesh(&["list-workloads", "TY"]);
    assert!(ty.status.success());
    assert_eq!(body_rows(&ty), 7);
    assert!(stdout(&ty).lines().skip(1).all(|l| l.starts_with("TY ")));

    let none = vmesh(&["list-workloads", "none-such"]);
    assert_eq!(none.status.code(), Some(0));
    assert_eq!(body_rows(&none), 0);

    let m = vmesh(&["list-workloads", "--suite", "matching"]);
    assert!(stdout(&m)
        .lines()
        .skip(1)
        .all(|l| l.contains("correlation")));
}

#[test]
fn schedule_prints_plan() {
    let o = vmesh(&["schedule", "--gemm", "64,64,64"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.contains("ndrange = [64, 64, 64]"));
    assert!(s.contains("bandwidth_per_mac = "));
    assert!(s.contains("[scheme]"));
}

#[test]
fn oversized_tile_is_config_error() {
    let o = vmesh(&["schedule", "--gemm", "64,64,64", "--tile", "128,1,1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = vmesh(&["schedule", "--workload", "NOPE 9"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_config_key_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "schema = 1\nworkload = \"AL CONV3\"\ncolour = 3\n").unwrap();
    let o = vmesh(&["schedule", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn correlation_on_systolic_is_unsupported() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = vmesh(&[
        "simulate",
        "--arch",
        "systolic",
        "--workload",
        "FN CORR",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

fn stats_of(out: &Path) -> String {
    fs::read_to_string(out.join("stats.csv")).unwrap()
}

#[test]
fn simulate_writes_hashed_files_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = vmesh(&[
            "simulate",
            "--gemm",
            "48,40,24",
            "--seed",
            "7",
            "--verify",
            "--trace",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("verified        true"));
    }
    assert_eq!(stats_of(&a), stats_of(&b));
    let m = fs::read_to_string(a.join("manifest.toml")).unwrap();
    let first = m.lines().next().unwrap();
    assert!(first.starts_with("# manifest-sha256: "));
    for f in ["stats.csv", "trace.csv"] {
        assert_eq!(
            fs::read_to_string(a.join(f))
                .unwrap()
                .lines()
                .next()
                .unwrap(),
            first
        );
    }
}

#[test]
fn sweep_records_failures_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sw");
    let o = vmesh(&[
        "sweep",
        "--workload",
        "AL CONV5,EVA BM",
        "--pes",
        "128",
        "--spatial",
        "14",
        "--workers",
        "2",
        "--timing-only",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let failures = fs::read_to_string(out.join("failures.csv")).unwrap();
    assert_eq!(failures.lines().filter(|l| l.contains("eva_bm")).count(), 2);
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 2 + 4);
    for f in ["table.csv", "roofline.csv"] {
        assert!(out.join(f).exists());
    }

    let again = vmesh(&["report", "--out", out.to_str().unwrap()]);
    assert!(again.status.success());
    assert_eq!(fs::read_to_string(out.join("report.csv")).unwrap(), report);
}
