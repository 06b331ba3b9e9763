use super::*;
use crate::embed::HashEmbedder;
use crate::operators::{DAY_MS, WEEK_MS, WINDOW_ANCHOR_MS};
use crate::provider::{Completion, CompletionParams, MockProvider, ProviderError};
use crate::schema::parse_schema;
use crate::store::StoreConfig;
use std::sync::atomic::{AtomicI64, Ordering};

const SCHEMA: &str = r#"{"tenant":"t","version":1,
  "events":[{"EventType":"ToolInvocation","Description":"one call of an external tool","Properties":[
    {"PropertyName":"tool","PropertyType":"string","Description":"tool name"},
    {"PropertyName":"situation","PropertyType":"string","Description":"usage situation"},
    {"PropertyName":"goal","PropertyType":"string","Description":"task goal"},
    {"PropertyName":"success","PropertyType":"boolean","Description":"whether it worked"}]}],
  "entities":[
    {"EntityType":"ToolProfile","Description":"what we know about a tool","Properties":[
      {"PropertyName":"failure_cases","PropertyType":"string","Description":"documented failure cases",
       "AggregateExpression":{"EventType":"ToolInvocation","PropertyName":"situation","Op":"LLM_MERGE","GroupBy":["tool"]}},
      {"PropertyName":"calls","PropertyType":"integer","Description":"number of calls",
       "AggregateExpression":{"EventType":"ToolInvocation","PropertyName":"tool","Op":"COUNT","GroupBy":["tool"]}},
      {"PropertyName":"history","PropertyType":"string","Description":"usage history",
       "AggregateExpression":{"EventType":"ToolInvocation","PropertyName":"situation","Op":"TIME_COMPRESS","GroupBy":["tool"]}}]},
    {"EntityType":"UserProfile","Description":"the user","Properties":[
      {"PropertyName":"preferences","PropertyType":"string","Description":"stated preferences",
       "AggregateExpression":{"EventType":"ToolInvocation","PropertyName":"goal","Op":"LLM_MERGE"}}]}]}"#;

const REPLY: &str = r#"{"events": [
  {"event_type": "ToolInvocation", "properties": {"tool": "web_search", "situation": "API lookup", "goal": "find docs", "success": true}},
  {"event_type": "ToolInvocation", "properties": {"tool": "pdf_reader", "situation": "scanned PDF", "goal": "read paper", "success": false}}],
 "entity_updates": [
  {"entity_type": "ToolProfile", "group_key": "tool=pdf_reader", "field": "failure_cases", "patch": "<<<< SEARCH\n====\nfails on scanned PDFs\n>>>> REPLACE"}]}"#;

// Tuesday of the first week of 2024 windows, well after the anchor.
const T0: i64 = WINDOW_ANCHOR_MS + 2800 * WEEK_MS + DAY_MS;

fn script(extra: &[(&str, &str)]) -> MockProvider {
    script_spanning(19, extra)
}

fn script_spanning(last: usize, extra: &[(&str, &str)]) -> MockProvider {
    let mut pairs: Vec<(String, String)> = extra.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
    let plan = format!(r#"{{"topics": [{{"label": "tools", "spans": [[0, {last}]]}}]}}"#);
    pairs.push(("Transcript:".into(), plan));
    pairs.push(("## Memory definitions".into(), REPLY.into()));
    MockProvider::from_pairs(pairs)
}

fn engine_with(store: Store, llm: Arc<dyn LlmProvider>) -> (MemoryBase, Arc<AtomicI64>) {
    let clock = Arc::new(AtomicI64::new(T0 + 60_000));
    let c = clock.clone();
    let mb = MemoryBase::new(store, Arc::new(HashEmbedder::default()), llm, EngineConfig::default())
        .unwrap()
        .with_clock(Arc::new(move || c.load(Ordering::SeqCst)));
    (mb, clock)
}

fn installed(llm: MockProvider) -> (MemoryBase, Arc<AtomicI64>) {
    let (mb, clock) = engine_with(Store::in_memory(StoreConfig::default()), Arc::new(llm));
    assert!(mb.install_schema(parse_schema(SCHEMA).unwrap()).unwrap().is_valid());
    (mb, clock)
}

fn session(id: &str) -> Session {
    let mut s = Session::new(id, "u1");
    for i in 0..20 {
        s.push(Role::User, format!("message {i} about tools"), T0 + i as i64);
    }
    s
}

#[test]
fn twentieth_message_flushes_and_commits_everything() {
    let (mb, _) = installed(script(&[]));
    for i in 0..19 {
        let r = mb.append_message("s1", "u1", Role::User, &format!("msg {i}"), T0 + i, None).unwrap();
        assert_eq!(r.status, AppendStatus::Buffered);
    }
    let r = mb.append_message("s1", "u1", Role::User, "msg 19", T0 + 19, None).unwrap();
    assert_eq!(r.status, AppendStatus::Flushed);
    let f = r.flush.unwrap();
    assert_eq!(f.event_ids.len(), 2);
    assert_eq!(mb.buffered("s1"), Some(0));

    let web = mb.get_entity("ToolProfile", "tool=web_search").unwrap();
    assert_eq!(web.properties["calls"], Value::Integer(1));
    let pdf = mb.get_entity("ToolProfile", "tool=pdf_reader").unwrap();
    assert_eq!(pdf.properties["failure_cases"], Value::String("fails on scanned PDFs".into()));
    // The pdf_reader merge is dropped because the same field was patched.
    assert_eq!(f.queued_merges, 2);
    let h = mb.health();
    assert_eq!(h.queue_depth, 2);
    assert_eq!(h.events, 2);
    assert_eq!(h.timelines, 2);
    assert_eq!(h.schema_version, Some(1));
    mb.store().read(|s| s.check_invariants(256)).unwrap();
    assert!(matches!(mb.get_entity("ToolProfile", "tool=nope"), Err(Error::UnknownEntity { .. })));
}

#[test]
fn stale_schema_version_is_rejected() {
    let (mb, _) = installed(script(&[]));
    let report = mb.install_schema(parse_schema(SCHEMA).unwrap()).unwrap();
    assert!(!report.is_valid());
    assert_eq!(report.violations[0].path, "version");
}

#[test]
fn flush_without_schema_fails() {
    let (mb, _) = engine_with(Store::in_memory(StoreConfig::default()), Arc::new(script(&[])));
    assert!(matches!(mb.ingest_session(&session("s")), Err(Error::NoSchema)));
}

#[test]
fn replay_is_short_circuited_across_restart() {
    let dir = tempfile::tempdir().unwrap();
    {
        let (store, _) = Store::open(dir.path(), StoreConfig::default()).unwrap();
        let (mb, _) = engine_with(store, Arc::new(script(&[])));
        mb.install_schema(parse_schema(SCHEMA).unwrap()).unwrap();
        let first = mb.ingest_session(&session("s1")).unwrap();
        assert!(!first.replayed);
        assert_eq!(first.extraction_id, extraction_id("s1", 20));
    }
    let (store, report) = Store::open(dir.path(), StoreConfig::default()).unwrap();
    assert!(report.warnings.is_empty());
    let llm = Arc::new(script(&[]));
    let (mb, _) = engine_with(store, llm.clone());
    let again = mb.ingest_session(&session("s1")).unwrap();
    assert!(again.replayed);
    assert!(llm.calls().is_empty());
    assert_eq!(mb.health().events, 2);

    // A client replaying with session indices gets duplicates, not new events.
    let r = mb.append_message("s1", "u1", Role::User, "message 3 about tools", T0 + 3, Some(3)).unwrap();
    assert_eq!(r.status, AppendStatus::Duplicate);
    assert!(matches!(
        mb.append_message("s1", "u1", Role::User, "x", T0, Some(25)),
        Err(Error::IndexGap { expected: 20, got: 25 })
    ));

    // New messages on the same session continue from the persisted offset.
    for i in 0..20 {
        mb.append_message("s1", "u1", Role::User, &format!("later {i}"), T0 + 100 + i, None).unwrap();
    }
    assert_eq!(mb.health().events, 4);
    assert_eq!(mb.store().read(|s| s.sessions["s1"]), 40);
}

#[test]
fn consolidation_merges_and_retries_failures() {
    let llm = script(&[("Field: failure_cases", "The new item adds a fact.\nFINAL: API lookup may time out")]);
    let (mb, _) = installed(llm);
    mb.ingest_session(&session("s1")).unwrap();
    let r = mb.run_consolidation(10).unwrap();
    assert_eq!(r.completed.len(), 1);
    assert_eq!(r.failed.len(), 1);
    let web = mb.get_entity("ToolProfile", "tool=web_search").unwrap();
    assert_eq!(web.properties["failure_cases"], Value::String("API lookup may time out".into()));
    // Failed merge keeps the old text and stays queued with one attempt.
    let user = mb.get_entity("UserProfile", "user=u1").unwrap();
    assert_eq!(user.properties["preferences"], Value::String(String::new()));
    let q: Vec<_> = mb.store().read(|s| s.queue.values().cloned().collect());
    assert_eq!(q.len(), 1);
    assert_eq!(q[0].attempts, 1);
    // Entity record text follows the merged value.
    let rec = mb.store().get_record(&web.id).unwrap();
    assert!(rec.text.contains("may time out"));
}

#[test]
fn compress_reinforce_expire() {
    let llm = script(&[("You consolidate", "Two memories.\nFINAL: used the tool once")]);
    let (mb, clock) = installed(llm);
    let f = mb.ingest_session(&session("s1")).unwrap();
    let (web_ev, pdf_ev) = (f.event_ids[0].clone(), f.event_ids[1].clone());

    // Still active: nothing happens.
    let r = mb.compress().unwrap();
    assert!(r.summaries.is_empty());

    clock.store(T0 + 3 * WEEK_MS, Ordering::SeqCst);
    let r = mb.compress().unwrap();
    assert_eq!(r.summaries.len(), 2);
    assert_eq!(r.ttl_assigned, 2);
    let rec = mb.store().get_record(&web_ev).unwrap();
    assert_eq!(rec.ttl_deadline, Some(T0 + 7 * WEEK_MS));
    assert!(rec.covered_by.is_some());
    let web = mb.get_entity("ToolProfile", "tool=web_search").unwrap();
    assert!(web.properties["history"].as_str().unwrap().contains("used the tool once"));
    // A second tick summarizes nothing new.
    assert!(mb.compress().unwrap().summaries.is_empty());

    let cfg = RecallConfig {
        quota_primary: 1,
        quota_keyword: 0,
        final_k: 1,
        ..RecallConfig::default()
    };
    let filter = SearchFilter {
        kinds: Some(vec![RecordKind::Event]),
        ..Default::default()
    };
    let hits = mb.search("web_search API lookup find docs", &cfg, &filter).unwrap();
    assert_eq!(hits[0].id, web_ev);
    assert_eq!(mb.store().get_record(&web_ev).unwrap().ttl_deadline, None);

    clock.store(T0 + 8 * WEEK_MS, Ordering::SeqCst);
    let pruned = mb.expire().unwrap();
    assert_eq!(pruned, vec![pdf_ev.clone()]);
    assert!(mb.store().get_record(&web_ev).is_some());
    mb.store().read(|s| s.check_invariants(256)).unwrap();
}

struct Slow(MockProvider);

impl LlmProvider for Slow {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> std::result::Result<Completion, ProviderError> {
        std::thread::sleep(std::time::Duration::from_millis(300));
        self.0.complete(prompt, params)
    }
}

#[test]
fn concurrent_flush_on_one_session_conflicts() {
    let (mb, _) = engine_with(Store::in_memory(StoreConfig::default()), Arc::new(Slow(script_spanning(4, &[]))));
    mb.install_schema(parse_schema(SCHEMA).unwrap()).unwrap();
    for i in 0..5 {
        mb.append_message("s1", "u1", Role::User, &format!("m {i}"), T0 + i, None).unwrap();
    }
    let mb = Arc::new(mb);
    let other = mb.clone();
    let t = std::thread::spawn(move || other.flush("s1"));
    std::thread::sleep(std::time::Duration::from_millis(100));
    assert!(matches!(mb.flush("s1"), Err(Error::FlushInProgress(_))));
    t.join().unwrap().unwrap();
    assert!(matches!(mb.flush("nope"), Err(Error::UnknownSession(_))));
}
