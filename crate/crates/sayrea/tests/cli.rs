use std::process::Command;

use sayrea_core::replay::DEFAULT_TRACE_JSONL;

fn sayrea() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sayrea"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn gen_trace_reproduces_shipped_trace() {
    let out = sayrea().args(["gen-trace", "--days", "10", "--seed", "7"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), DEFAULT_TRACE_JSONL);
}

#[test]
fn replay_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    std::fs::write(&trace, DEFAULT_TRACE_JSONL).unwrap();
    let out_dir = dir.path().join("out");
    let out = sayrea()
        .args(["replay", "--trace"])
        .arg(&trace)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("days=10 "));
    for f in ["metrics.json", "days.csv", "rules.jsonl", "journal.jsonl"] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out_dir.join("days.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["rules_by_day"].as_array().unwrap().len(), 10);
}

#[test]
fn replay_reports_malformed_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("bad.jsonl");
    std::fs::write(&trace, "{\"v\":1,\"ts\":0,\"kind\":\"usage\",\"service\":\"a:open\"}\nnot json\n").unwrap();
    let out = sayrea().args(["replay", "--trace"]).arg(&trace).arg("--out").arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("PARSE_ERROR") && err.contains("line 2"), "{err}");
}
