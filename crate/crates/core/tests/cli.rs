use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn membase(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_membase"))
        .args(args)
        .env_remove("MEMBASE_DATA_DIR")
        .env("MEMBASE_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ingest(extra: &[&str]) -> Output {
    let (session, schema, script) = (
        fixture("recursion_game/session.json"),
        fixture("recursion_game/schema.json"),
        fixture("recursion_game/mock_script.json"),
    );
    let mut args = vec!["ingest", &session, "--schema", &schema, "--mock-script", &script];
    args.extend_from_slice(extra);
    membase(&args)
}

#[test]
fn schema_validate_rejects_avg_over_string() {
    let o = membase(&["schema", "validate", &fixture("avg_over_string.json")]);
    assert_eq!(o.status.code(), Some(1));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["violations"][0]["message"], "AVG requires numeric source");
    assert!(stderr(&o).contains("violation: entities[0].Properties[0].AggregateExpression.Op"));

    let ok = membase(&["schema", "validate", &fixture("tools/schema.json")]);
    assert!(ok.status.success(), "{}", stderr(&ok));
}

#[test]
fn ingest_merges_recursion_spans_and_drops_the_game_detour() {
    let o = ingest(&[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let events = out["events"].as_array().unwrap();
    assert_eq!(events.len(), 1);
    let ev = &events[0];
    assert_eq!(ev["topic"], "recursion");
    assert_eq!(ev["properties"]["subject"], "recursion");
    let content = ev["properties"]["content"].as_str().unwrap().to_lowercase();
    for part in ["calls itself", "base case", "merge sort", "o(n log n)"] {
        assert!(content.contains(part), "missing {part:?}");
    }
    for noise in ["game", "chess", "minimax", "alpha-beta", "enemy"] {
        assert!(!content.contains(noise), "leaked {noise:?}");
    }
    assert_eq!(out["extraction"]["event_ids"].as_array().unwrap().len(), 1);
    assert_eq!(out["extraction"]["replayed"], false);
    assert_eq!(out["extraction"]["warnings"], Value::Array(vec![]));
}

#[test]
fn ingest_query_snapshot_restore_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let data = data.to_str().unwrap();
    let o = ingest(&["--data-dir", data]);
    assert!(o.status.success(), "{}", stderr(&o));

    // Re-ingesting the same session replays instead of duplicating.
    let again: Value = serde_json::from_str(&stdout(&ingest(&["--data-dir", data]))).unwrap();
    assert_eq!(again["extraction"]["replayed"], true);

    let q = membase(&["query", "merge sort efficiency", "--k", "10", "--w-time", "0.3", "--data-dir", data]);
    assert!(q.status.success(), "{}", stderr(&q));
    let hits: Value = serde_json::from_str(&stdout(&q)).unwrap();
    let hits = hits.as_array().unwrap();
    assert_eq!(hits.len(), 1);
    assert!(hits[0]["text"].as_str().unwrap().contains("Merge sort"));

    let snap = tmp.path().join("copy.mbs");
    let s = membase(&["snapshot", "--data-dir", data, "--out", snap.to_str().unwrap()]);
    assert!(s.status.success(), "{}", stderr(&s));
    assert!(snap.is_file());

    let other = tmp.path().join("restored");
    let r = membase(&["restore", snap.to_str().unwrap(), "--data-dir", other.to_str().unwrap()]);
    assert!(r.status.success(), "{}", stderr(&r));
    assert!(stdout(&r).contains("restored 1 records"));

    // w_time 0.3 mixes in wall-clock age, so compare ids and origin scores only.
    let q2 = membase(&["query", "merge sort efficiency", "--k", "10", "--data-dir", other.to_str().unwrap()]);
    let hits2: Value = serde_json::from_str(&stdout(&q2)).unwrap();
    assert_eq!(hits2[0]["id"], hits[0]["id"]);
    assert_eq!(hits2[0]["s_origin"], hits[0]["s_origin"]);
}

#[test]
fn bench_prints_percentiles() {
    let o = membase(&["bench", "rerank", "--candidates", "50", "--tokens", "8", "--iterations", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("candidates=50 tokens=8"), "{out}");
    let line = out.lines().find(|l| l.starts_with("p50_ms=")).unwrap();
    let p: Vec<f64> = line
        .split_whitespace()
        .map(|kv| kv.split_once('=').unwrap().1.parse().unwrap())
        .collect();
    assert!(p[0] <= p[1] && p[1] <= p[2], "{line}");
}

#[test]
fn failures_exit_nonzero_with_problem_detail() {
    let o = membase(&[
        "ingest",
        "/nonexistent/session.json",
        "--schema",
        &fixture("recursion_game/schema.json"),
        "--mock-script",
        &fixture("recursion_game/mock_script.json"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let p: Value = serde_json::from_str(stderr(&o).lines().last().unwrap()).unwrap();
    assert_eq!(p["code"], "command_failed");
    assert_eq!(p["path"], "ingest");
    assert!(p["message"].as_str().unwrap().contains("/nonexistent/session.json"));

    let bad = membase(&["bench", "rerank", "--candidates", "0"]);
    assert_eq!(bad.status.code(), Some(2));
}
