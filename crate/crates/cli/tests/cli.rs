use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_filecast"))
}

fn scenario(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(rel)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn run_writes_report_and_trace_that_replays() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.json");
    let trace = dir.path().join("trace.ndjson");
    let o = bin()
        .arg("run")
        .arg(scenario("suite/steady.json"))
        .args(["--seed", "3", "--report"])
        .arg(&report)
        .arg("--trace")
        .arg(&trace)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["seed"], 3);
    assert_eq!(r["verdict"]["pass"], true);

    let o = bin().arg("replay").arg(&trace).output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("identical"));

    // A tampered trace no longer matches.
    let text = std::fs::read_to_string(&trace).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.truncate(lines.len() - 1);
    std::fs::write(&trace, lines.join("\n")).unwrap();
    let o = bin().arg("replay").arg(&trace).output().unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn monitor_failure_exits_one() {
    let o = bin()
        .arg("run")
        .arg(scenario("mutations/no_chunk_prefix.json"))
        .args(["--report", "/dev/null"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("FAIL"));
}

#[test]
fn config_error_exits_two_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, "{\n  \"name\": \"x\",\n  \"seed\": \"oops\"\n}\n").unwrap();
    let o = bin().arg("run").arg(&p).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("line 3"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn interleavings_pass_and_mutation_fails() {
    let o = bin()
        .args(["check-interleavings", "--trials", "500"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let o = bin()
        .args([
            "check-interleavings",
            "--trials",
            "500",
            "--mutation",
            "publish-before-ack",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("minimized counterexample"));
}

#[test]
fn build_tree_prints_minimum() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.json");
    std::fs::write(
        &p,
        r#"{"edges": [
            {"a": 0, "b": 1, "cost": 1}, {"a": 0, "b": 2, "cost": 2}, {"a": 0, "b": 3, "cost": 4},
            {"a": 1, "b": 2, "cost": 1}, {"a": 1, "b": 3, "cost": 3}, {"a": 2, "b": 3, "cost": 5}
        ]}"#,
    )
    .unwrap();
    let o = bin()
        .arg("build-tree")
        .arg(&p)
        .args(["--source", "0", "--alpha", "0", "--beta", "0"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["total_cost"], 5.0);
    assert_eq!(v["edges"], serde_json::json!([[0, 1], [1, 2], [1, 3]]));
}
