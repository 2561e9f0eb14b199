use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semprefetch"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn run_writes_report_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "workload.kind = indirect\nworkload.size = 5000\nsim.warmup = 1000\n",
    )
    .unwrap();
    let out = dir.path().join("report.json");
    let csv = dir.path().join("pies.csv");
    let o = cli(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
        "--pie-csv",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["workload"], "indirect");
    assert_eq!(report["seed"], 3);
    assert!(std::fs::read_to_string(&csv).unwrap().lines().count() >= 2);
}

#[test]
fn compare_reports_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bfs.cfg");
    std::fs::write(
        &cfg,
        "workload.kind = bfs_csr\nworkload.size = 4096\nsim.warmup = 1000\n",
    )
    .unwrap();
    let o = cli(&[
        "compare",
        cfg.to_str().unwrap(),
        "--prefetchers",
        "none,semantic",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let text = v.to_string();
    assert!(text.contains("cycle_ratio"), "{text}");
}

#[test]
fn dump_slices_shows_the_double_deref_slice() {
    let o = cli(&[
        "dump-slices",
        "--workload",
        "double_deref_fig6",
        "--set",
        "workload.size=5000",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("armed (3 ops"), "{text}");
    assert!(text.contains("# stride"));
}

#[test]
fn dump_program_round_trips_through_file_workloads() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&[
        "dump-program",
        "--workload",
        "linked_list",
        "--set",
        "workload.size=300",
    ]);
    assert!(o.status.success());
    let path = dir.path().join("list.s");
    std::fs::write(&path, stdout(&o)).unwrap();
    let set = format!("workload.path={}", path.display());
    let o = cli(&[
        "run",
        "--set",
        "workload.kind=file",
        "--set",
        &set,
        "--prefetcher",
        "none",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["halted"], true);
}

#[test]
fn bad_input_exits_nonzero() {
    assert!(!cli(&["run", "--set", "no.such.key=1"]).status.success());
    assert!(!cli(&["run", "--config", "/nonexistent/cfg"])
        .status
        .success());
    let o = cli(&["run", "--set", "semantic.context_bits=30"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("context_bits"));
}
