mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn opentools(state: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opentools"))
        .arg("--state-dir")
        .arg(state)
        .args(args)
        .env_remove("LLM_BASE_URL")
        .env_remove("OPENTOOLS_STUB_URL")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Exactly one JSON document on stdout.
fn json_doc(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout)
        .unwrap_or_else(|e| panic!("stdout is not one JSON document ({e}): {}", stdout(o)))
}

fn initialized() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = opentools(dir.path(), &["init"]);
    assert!(o.status.success());
    dir
}

fn manifest(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("seed/tools")
        .join(format!("{name}.json"))
        .display()
        .to_string()
}

#[test]
fn validate_manifest_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = opentools(dir.path(), &["tools", "validate", &manifest("calculator")]);
    assert_eq!(o.status.code(), Some(0));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"name": "Bad Name", "version": "x"}"#).unwrap();
    let o = opentools(
        dir.path(),
        &[
            "--format",
            "json",
            "tools",
            "validate",
            bad.to_str().unwrap(),
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    let doc = json_doc(&o);
    assert!(doc["error"]["violations"].as_array().unwrap().len() >= 2);
}

#[test]
fn usage_and_state_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        opentools(dir.path(), &["frobnicate"]).status.code(),
        Some(1)
    );
    assert_eq!(
        opentools(dir.path(), &["agent", "run", "--policy", "react"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        opentools(dir.path(), &["tools", "list"]).status.code(),
        Some(4)
    );
    let dir = initialized();
    assert_eq!(
        opentools(
            dir.path(),
            &["agent", "run", "--policy", "tree_search", "--query", "q"]
        )
        .status
        .code(),
        Some(1)
    );
    std::fs::write(dir.path().join("tools/calculator.json"), "{ not json").unwrap();
    let o = opentools(dir.path(), &["tools", "list"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tools/calculator.json"));
}

#[test]
fn agent_run_with_mock_script() {
    let dir = initialized();
    let script = common::fixture("react_168.json");
    let o = opentools(
        dir.path(),
        &[
            "agent",
            "run",
            "--policy",
            "react",
            "--mock-script",
            script.to_str().unwrap(),
            "--query",
            "24*7?",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(stdout(&o), "168\n");

    let failing = dir.path().join("down.json");
    std::fs::write(&failing, r#"[{"error": "connection refused"}]"#).unwrap();
    let o = opentools(
        dir.path(),
        &[
            "--format",
            "json",
            "agent",
            "run",
            "--policy",
            "react",
            "--mock-script",
            failing.to_str().unwrap(),
            "--query",
            "q",
        ],
    );
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(json_doc(&o)["status"], "failed");
}

#[test]
fn agent_run_with_selection() {
    let dir = initialized();
    let script = dir.path().join("s.json");
    std::fs::write(&script, r#"[{"content": "FINAL ANSWER: 3.107"}]"#).unwrap();
    let o = opentools(
        dir.path(),
        &[
            "--format",
            "json",
            "agent",
            "run",
            "--policy",
            "react",
            "--query",
            "convert 5 km to miles",
            "--select",
            "k=2,mode=lexical",
            "--mock-script",
            script.to_str().unwrap(),
        ],
    );
    assert!(o.status.success());
    let run = json_doc(&o);
    assert_eq!(run["toolbox"].as_array().unwrap().len(), 2);
    assert_eq!(run["toolbox"][0], "unit_converter");
    let o = opentools(
        dir.path(),
        &[
            "agent", "run", "--policy", "react", "--query", "q", "--select", "k=two",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_and_report_are_deterministic_and_match_the_service() {
    let dir = initialized();
    let first = opentools(
        dir.path(),
        &["--format", "json", "eval", "run", "--parallelism", "8"],
    );
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let r1 = opentools(dir.path(), &["--format", "json", "report"]);
    let second = opentools(
        dir.path(),
        &["--format", "json", "eval", "run", "--parallelism", "1"],
    );
    assert!(second.status.success());
    let r2 = opentools(dir.path(), &["--format", "json", "report"]);
    let (a, b) = (json_doc(&r1), json_doc(&r2));
    assert_eq!(b["round_id"], 2);
    for (x, y) in a["tools"]
        .as_array()
        .unwrap()
        .iter()
        .zip(b["tools"].as_array().unwrap())
    {
        if x["category"] == "program" {
            assert_eq!(x["accuracy"], y["accuracy"]);
            assert_eq!(x["suite_version"], y["suite_version"]);
            assert_eq!(x["suite_size"], y["suite_size"]);
        }
    }
    let calc = json_doc(&opentools(
        dir.path(),
        &["--format", "json", "report", "--tool", "calculator"],
    ));
    assert_eq!(calc["accuracy"], 1.0);

    // Same state through the service: identical document.
    let ws = opentools::workspace::Workspace::open_dir(
        dir.path(),
        opentools::llm::BackendRegistry::new(),
        opentools::runtime::EnvVars::isolated(),
    )
    .unwrap();
    let service_doc: Value = serde_json::from_slice(&ws.report().unwrap().to_bytes()).unwrap();
    assert_eq!(service_doc, b);
}

#[test]
fn submit_review_round_trip() {
    let dir = initialized();
    let case = dir.path().join("case.json");
    std::fs::write(
        &case,
        r#"{"id": "cli-case", "tool": "string_transformer", "input": {"text": "abc", "operation": "upper"},
            "expect": {"kind": "exact", "expected": "ABC"}}"#,
    )
    .unwrap();
    let o = opentools(
        dir.path(),
        &[
            "--format",
            "json",
            "tests",
            "submit",
            case.to_str().unwrap(),
        ],
    );
    assert!(o.status.success(), "{}", stdout(&o));
    let id = json_doc(&o)["id"].as_str().unwrap().to_string();
    let pending = json_doc(&opentools(
        dir.path(),
        &["--format", "json", "tests", "list", "--status", "pending"],
    ));
    assert_eq!(pending.as_array().unwrap().len(), 1);
    assert_eq!(
        opentools(dir.path(), &["review", &id, "--accept", "--reason", "ok"])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        opentools(dir.path(), &["review", &id, "--reject"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        opentools(dir.path(), &["review", &id]).status.code(),
        Some(1)
    );
    // Duplicate ids are validation failures.
    assert_eq!(
        opentools(dir.path(), &["tests", "submit", case.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}
