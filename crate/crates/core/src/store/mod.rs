//! Embedded storage: memory records with dense, sparse and token vectors,
//! events, entities, the keyword graph, topic timelines and the
//! consolidation queue. Every mutation is an [`Op`]; with a data directory
//! each op is appended to a checksummed log before it becomes visible.

mod codec;
mod persist;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{sparse_terms, Embedder, MAX_TOKEN_VECTORS};
use crate::operators::{ConsolidationTask, TopicTimeline};
use crate::retrieval::multivector::{compress_tokens, CompressedTokens};
use crate::schema::{EntityInstance, EventInstance, MemorySchema};

pub use persist::{RecoveryReport, SNAPSHOT_FILE, WAL_FILE};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("record {id} rejected: {reason}")]
    Invalid { id: String, reason: String },
    #[error("corrupt {file} at byte offset {offset}: {message}")]
    Corrupt {
        file: String,
        offset: u64,
        message: String,
    },
    #[error("store io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Event,
    Entity,
    Summary,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    /// Event type, entity type, or the summarized timeline's topic.
    pub type_name: String,
    pub timestamp: i64,
    #[serde(default)]
    pub user: Option<String>,
    #[serde(default)]
    pub topic: Option<String>,
    #[serde(default)]
    pub instance_weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub id: String,
    pub kind: RecordKind,
    pub text: String,
    #[serde(with = "codec::vector")]
    pub dense: Vec<f32>,
    pub sparse: BTreeMap<String, f32>,
    #[serde(with = "codec::vectors")]
    pub tokens: Vec<Vec<f32>>,
    pub meta: RecordMeta,
    #[serde(default)]
    pub ttl_deadline: Option<i64>,
    /// Summary record that covers this one, once compressed.
    #[serde(default)]
    pub covered_by: Option<String>,
}

impl MemoryRecord {
    /// Builds a record with all vectors derived from `text`.
    pub fn from_text(
        id: impl Into<String>,
        kind: RecordKind,
        text: impl Into<String>,
        meta: RecordMeta,
        embedder: &dyn Embedder,
    ) -> Self {
        let text = text.into();
        let mut tokens = embedder.embed_tokens(&text);
        tokens.truncate(MAX_TOKEN_VECTORS);
        MemoryRecord {
            id: id.into(),
            kind,
            dense: embedder.embed_dense(&text),
            sparse: sparse_terms(&text),
            tokens,
            text,
            meta,
            ttl_deadline: None,
            covered_by: None,
        }
    }

    pub fn check(&self, dim: usize) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        if self.dense.len() != dim {
            return Err(format!("dense vector has dim {}, store expects {dim}", self.dense.len()));
        }
        let n = norm(&self.dense);
        if (n - 1.0).abs() > 1e-6 {
            return Err(format!("dense vector norm {n} is not 1"));
        }
        if self.tokens.len() > MAX_TOKEN_VECTORS {
            return Err(format!("{} token vectors exceed the cap of {MAX_TOKEN_VECTORS}", self.tokens.len()));
        }
        for (i, t) in self.tokens.iter().enumerate() {
            if t.len() != dim {
                return Err(format!("token vector {i} has dim {}", t.len()));
            }
            let n = norm(t);
            if (n - 1.0).abs() > 1e-5 {
                return Err(format!("token vector {i} norm {n} is not 1"));
            }
        }
        if let Some((t, w)) = self.sparse.iter().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
            return Err(format!("sparse weight for {t:?} is {w}"));
        }
        Ok(())
    }
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt()
}

/// A keyword and the mean embedding of the records linked to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordNode {
    pub keyword: String,
    pub embedding: Vec<f32>,
    pub count: usize,
    pub linked_records: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SearchFilter {
    pub kinds: Option<Vec<RecordKind>>,
    pub type_name: Option<String>,
    pub user: Option<String>,
    pub topic: Option<String>,
    pub since: Option<i64>,
    pub until: Option<i64>,
}

impl SearchFilter {
    pub fn matches(&self, r: &MemoryRecord) -> bool {
        self.kinds.as_ref().map_or(true, |k| k.contains(&r.kind))
            && self.type_name.as_ref().map_or(true, |t| *t == r.meta.type_name)
            && self.user.as_ref().map_or(true, |u| r.meta.user.as_ref() == Some(u))
            && self.topic.as_ref().map_or(true, |t| r.meta.topic.as_ref() == Some(t))
            && self.since.map_or(true, |s| r.meta.timestamp >= s)
            && self.until.map_or(true, |u| r.meta.timestamp < u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridHit {
    pub id: String,
    pub s_origin: f64,
    pub dense: f64,
    pub sparse: f64,
}

/// A single logged mutation. Every op is idempotent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    InstallSchema { schema: MemorySchema },
    UpsertRecord { record: MemoryRecord },
    DeleteRecord { id: String },
    PutEvent { event: EventInstance },
    PutEntity { entity: EntityInstance },
    KeywordLink { keyword: String, record_ids: Vec<String> },
    PutTimeline { timeline: TopicTimeline },
    Enqueue { task: ConsolidationTask },
    Complete { task_id: u64 },
    MarkExtraction { id: String },
    /// Messages of `session` consumed by flushes so far; keeps the maximum.
    SessionProgress { session: String, messages: usize },
    Reinforce { record_id: String, at: i64 },
    Batch { ops: Vec<Op> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoreConfig {
    pub dim: usize,
    pub token_merge_threshold: f32,
    pub fsync: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            dim: crate::embed::DEFAULT_DIM,
            token_merge_threshold: 0.95,
            fsync: false,
        }
    }
}

/// The in-memory tables. Readers get a consistent view through [`Store::read`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StoreState {
    pub schema: Option<MemorySchema>,
    pub records: BTreeMap<String, MemoryRecord>,
    pub events: BTreeMap<String, EventInstance>,
    pub entities: BTreeMap<String, EntityInstance>,
    pub keywords: BTreeMap<String, KeywordNode>,
    pub timelines: BTreeMap<String, TopicTimeline>,
    pub queue: BTreeMap<u64, ConsolidationTask>,
    pub extractions: BTreeSet<String>,
    pub sessions: BTreeMap<String, usize>,
    pub reinforced: BTreeMap<String, i64>,
    /// Merged and quantized token vectors, derived from `records`.
    pub compressed: HashMap<String, CompressedTokens>,
    token_merge_threshold: f32,
}

fn rank_desc(a: &(f64, i64, &str), b: &(f64, i64, &str)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| b.1.cmp(&a.1))
        .then_with(|| a.2.cmp(b.2))
}

fn min_max(hits: &[Hit]) -> HashMap<&str, f64> {
    let lo = hits.iter().map(|h| h.score).fold(f64::INFINITY, f64::min);
    let hi = hits.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
    hits.iter()
        .map(|h| {
            let v = if hi > lo { (h.score - lo) / (hi - lo) } else { 1.0 };
            (h.id.as_str(), v)
        })
        .collect()
}

impl StoreState {
    fn new(cfg: &StoreConfig) -> Self {
        StoreState {
            token_merge_threshold: cfg.token_merge_threshold,
            ..Default::default()
        }
    }

    fn top_k(&self, mut scored: Vec<(f64, i64, &str)>, k: usize) -> Vec<Hit> {
        scored.sort_by(rank_desc);
        scored.truncate(k);
        scored
            .into_iter()
            .map(|(score, _, id)| Hit { id: id.to_string(), score })
            .collect()
    }

    /// Exact cosine scan; ties go to the newer record.
    pub fn dense_search(&self, q: &[f32], k: usize, filter: &SearchFilter) -> Vec<Hit> {
        let scored = self
            .records
            .values()
            .filter(|r| filter.matches(r) && r.dense.len() == q.len())
            .map(|r| (dot64(q, &r.dense), r.meta.timestamp, r.id.as_str()))
            .collect();
        self.top_k(scored, k)
    }

    /// Dot product over shared terms; records with no shared term are excluded.
    pub fn sparse_search(&self, q: &BTreeMap<String, f32>, k: usize, filter: &SearchFilter) -> Vec<Hit> {
        let scored = self
            .records
            .values()
            .filter(|r| filter.matches(r))
            .filter_map(|r| {
                let s: f64 = q
                    .iter()
                    .filter_map(|(t, w)| r.sparse.get(t).map(|x| f64::from(*w) * f64::from(*x)))
                    .sum();
                (s > 0.0).then_some((s, r.meta.timestamp, r.id.as_str()))
            })
            .collect();
        self.top_k(scored, k)
    }

    /// Dense and sparse lists of `4k` each, min-max normalized per list and
    /// mixed as `alpha·dense + (1-alpha)·sparse`.
    pub fn hybrid_search(
        &self,
        query: &str,
        k: usize,
        filter: &SearchFilter,
        embedder: &dyn Embedder,
        alpha: f64,
    ) -> Vec<HybridHit> {
        let fetch = k.saturating_mul(4);
        let q = embedder.embed_dense(query);
        let dense: Vec<Hit> = self
            .dense_search(&q, fetch, filter)
            .into_iter()
            .filter(|h| h.score > 0.0)
            .collect();
        let sparse = self.sparse_search(&sparse_terms(query), fetch, filter);
        let (dn, sn) = (min_max(&dense), min_max(&sparse));
        let mut ids: BTreeSet<&str> = dn.keys().copied().collect();
        ids.extend(sn.keys().copied());
        let raw_d: HashMap<&str, f64> = dense.iter().map(|h| (h.id.as_str(), h.score)).collect();
        let raw_s: HashMap<&str, f64> = sparse.iter().map(|h| (h.id.as_str(), h.score)).collect();
        let mut out: Vec<(f64, i64, &str)> = ids
            .into_iter()
            .map(|id| {
                let d = dn.get(id).copied().unwrap_or(0.0);
                let s = sn.get(id).copied().unwrap_or(0.0);
                (alpha * d + (1.0 - alpha) * s, self.records[id].meta.timestamp, id)
            })
            .collect();
        out.sort_by(rank_desc);
        out.truncate(k);
        out.into_iter()
            .map(|(s_origin, _, id)| HybridHit {
                id: id.to_string(),
                s_origin,
                dense: raw_d.get(id).copied().unwrap_or(0.0),
                sparse: raw_s.get(id).copied().unwrap_or(0.0),
            })
            .collect()
    }

    /// Records linked to keyword nodes whose embedding is at least `floor`
    /// similar to the query; each record keeps its best node score.
    pub fn keyword_search(&self, query: &str, k: usize, embedder: &dyn Embedder, floor: f64) -> Vec<Hit> {
        let q = embedder.embed_dense(query);
        let mut best: HashMap<&str, f64> = HashMap::new();
        for node in self.keywords.values() {
            if node.embedding.len() != q.len() {
                continue;
            }
            let s = dot64(&q, &node.embedding);
            if s < floor {
                continue;
            }
            for id in &node.linked_records {
                let e = best.entry(id.as_str()).or_insert(f64::NEG_INFINITY);
                *e = e.max(s);
            }
        }
        let scored = best
            .into_iter()
            .filter_map(|(id, s)| self.records.get(id).map(|r| (s, r.meta.timestamp, id)))
            .collect();
        self.top_k(scored, k)
    }

    fn recompute_keyword(&mut self, keyword: &str) {
        let Some(node) = self.keywords.get_mut(keyword) else {
            return;
        };
        node.linked_records.retain(|id| self.records.contains_key(id));
        if node.linked_records.is_empty() {
            self.keywords.remove(keyword);
            return;
        }
        // Summation in sorted id order keeps the mean independent of link order.
        let dim = self.records[node.linked_records.iter().next().expect("non-empty")].dense.len();
        let mut acc = vec![0f64; dim];
        for id in &node.linked_records {
            for (a, x) in acc.iter_mut().zip(&self.records[id].dense) {
                *a += f64::from(*x);
            }
        }
        let n = node.linked_records.len() as f64;
        let norm = acc.iter().map(|a| (a / n) * (a / n)).sum::<f64>().sqrt();
        node.embedding = if norm > 0.0 {
            acc.iter().map(|a| (a / n / norm) as f32).collect()
        } else {
            vec![0.0; dim]
        };
        node.count = node.linked_records.len();
    }

    fn remove_record(&mut self, id: &str) {
        if self.records.remove(id).is_none() {
            return;
        }
        self.compressed.remove(id);
        let touched: Vec<String> = self
            .keywords
            .values()
            .filter(|n| n.linked_records.contains(id))
            .map(|n| n.keyword.clone())
            .collect();
        for kw in touched {
            self.recompute_keyword(&kw);
        }
    }

    fn apply(&mut self, op: Op) {
        match op {
            Op::InstallSchema { schema } => self.schema = Some(schema),
            Op::UpsertRecord { record } => {
                let compressed = compress_tokens(&record.tokens, self.token_merge_threshold, MAX_TOKEN_VECTORS);
                let id = record.id.clone();
                self.compressed.insert(id.clone(), compressed);
                self.records.insert(id.clone(), record);
                let touched: Vec<String> = self
                    .keywords
                    .values()
                    .filter(|n| n.linked_records.contains(&id))
                    .map(|n| n.keyword.clone())
                    .collect();
                for kw in touched {
                    self.recompute_keyword(&kw);
                }
            }
            Op::DeleteRecord { id } => {
                self.remove_record(&id);
                self.events.remove(&id);
            }
            Op::PutEvent { event } => {
                self.events.insert(event.id.clone(), event);
            }
            Op::PutEntity { entity } => {
                self.entities.insert(entity.id.clone(), entity);
            }
            Op::KeywordLink { keyword, record_ids } => {
                let node = self.keywords.entry(keyword.clone()).or_insert_with(|| KeywordNode {
                    keyword: keyword.clone(),
                    embedding: Vec::new(),
                    count: 0,
                    linked_records: BTreeSet::new(),
                });
                node.linked_records.extend(record_ids);
                self.recompute_keyword(&keyword);
            }
            Op::PutTimeline { timeline } => {
                self.timelines.insert(timeline.id.clone(), timeline);
            }
            Op::Enqueue { task } => {
                self.queue.insert(task.id, task);
            }
            Op::Complete { task_id } => {
                self.queue.remove(&task_id);
            }
            Op::MarkExtraction { id } => {
                self.extractions.insert(id);
            }
            Op::SessionProgress { session, messages } => {
                let n = self.sessions.entry(session).or_insert(0);
                *n = (*n).max(messages);
            }
            Op::Reinforce { record_id, at } => {
                if let Some(r) = self.records.get_mut(&record_id) {
                    r.ttl_deadline = None;
                }
                if let Some(e) = self.events.get_mut(&record_id) {
                    e.ttl_deadline = None;
                }
                for tl in self.timelines.values_mut() {
                    if let Some(entry) = tl.events.iter_mut().find(|e| e.event_id == record_id) {
                        entry.ttl_deadline = None;
                        tl.last_active = tl.last_active.max(at);
                    }
                }
                let e = self.reinforced.entry(record_id).or_insert(at);
                *e = (*e).max(at);
            }
            Op::Batch { ops } => {
                for op in ops {
                    self.apply(op);
                }
            }
        }
    }

    /// Records past their deadline whose covering summary still exists and
    /// that were never reinforced.
    pub fn expirable(&self, now: i64) -> Vec<String> {
        self.records
            .values()
            .filter(|r| {
                r.ttl_deadline.is_some_and(|d| d < now)
                    && r.covered_by.as_ref().is_some_and(|s| self.records.contains_key(s))
                    && !self.reinforced.contains_key(&r.id)
            })
            .map(|r| r.id.clone())
            .collect()
    }

    pub fn next_task_id(&self) -> u64 {
        self.queue.keys().next_back().map_or(1, |k| k + 1)
    }

    /// Checks the structural invariants; returns the first violation found.
    pub fn check_invariants(&self, dim: usize) -> Result<(), String> {
        for r in self.records.values() {
            r.check(dim).map_err(|e| format!("{}: {e}", r.id))?;
            if !self.compressed.contains_key(&r.id) {
                return Err(format!("{}: missing token sidecar", r.id));
            }
        }
        for node in self.keywords.values() {
            if node.count != node.linked_records.len() || node.linked_records.is_empty() {
                return Err(format!("keyword {}: bad contributor count", node.keyword));
            }
            if let Some(id) = node.linked_records.iter().find(|id| !self.records.contains_key(*id)) {
                return Err(format!("keyword {}: dangling link {id}", node.keyword));
            }
        }
        for e in self.entities.values() {
            for (field, acc) in &e.accumulators {
                if acc.count > 0 {
                    let want = acc.sum / acc.count as f64;
                    if e.properties.get(field).and_then(crate::schema::Value::as_f64) != Some(want) {
                        return Err(format!("{}: {field} disagrees with its accumulator", e.id));
                    }
                }
            }
        }
        for tl in self.timelines.values() {
            if tl.events.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
                return Err(format!("timeline {}: events out of order", tl.id));
            }
        }
        Ok(())
    }
}

fn validate_op(op: &Op, dim: usize) -> Result<(), StoreError> {
    match op {
        Op::UpsertRecord { record } => record.check(dim).map_err(|reason| StoreError::Invalid {
            id: record.id.clone(),
            reason,
        }),
        Op::Batch { ops } => ops.iter().try_for_each(|o| validate_op(o, dim)),
        _ => Ok(()),
    }
}

/// Thread-safe store handle. Writes are serialized; reads take a shared lock.
pub struct Store {
    cfg: StoreConfig,
    state: RwLock<StoreState>,
    wal: Mutex<Option<persist::Wal>>,
    dir: Option<PathBuf>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("dir", &self.dir).finish_non_exhaustive()
    }
}

impl Store {
    pub fn in_memory(cfg: StoreConfig) -> Self {
        Store {
            state: RwLock::new(StoreState::new(&cfg)),
            cfg,
            wal: Mutex::new(None),
            dir: None,
        }
    }

    /// Loads the snapshot (if any) and replays the log found in `dir`.
    pub fn open(dir: &Path, cfg: StoreConfig) -> Result<(Self, RecoveryReport), StoreError> {
        std::fs::create_dir_all(dir)?;
        let mut state = StoreState::new(&cfg);
        let report = persist::recover(dir, &mut |op| state.apply(op))?;
        let wal = persist::Wal::open(&dir.join(WAL_FILE), report.wal_valid_len, cfg.fsync)?;
        Ok((
            Store {
                cfg,
                state: RwLock::new(state),
                wal: Mutex::new(Some(wal)),
                dir: Some(dir.to_path_buf()),
            },
            report,
        ))
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Validates, logs, then applies. The op is acknowledged once this returns.
    pub fn apply(&self, op: Op) -> Result<(), StoreError> {
        validate_op(&op, self.cfg.dim)?;
        let mut wal = self.wal.lock();
        if let Some(w) = wal.as_mut() {
            w.append(&op)?;
        }
        self.state.write().apply(op);
        Ok(())
    }

    pub fn read<R>(&self, f: impl FnOnce(&StoreState) -> R) -> R {
        f(&self.state.read())
    }

    /// Clone of the current tables.
    pub fn state(&self) -> StoreState {
        self.state.read().clone()
    }

    pub fn upsert_record(&self, record: MemoryRecord) -> Result<String, StoreError> {
        let id = record.id.clone();
        let unchanged = self.read(|s| s.records.get(&id) == Some(&record));
        if !unchanged {
            self.apply(Op::UpsertRecord { record })?;
        }
        Ok(id)
    }

    pub fn get_record(&self, id: &str) -> Option<MemoryRecord> {
        self.read(|s| s.records.get(id).cloned())
    }

    pub fn keyword_update(&self, record_id: &str, keywords: &[String]) -> Result<(), StoreError> {
        let ops: Vec<Op> = keywords
            .iter()
            .map(|k| Op::KeywordLink {
                keyword: k.clone(),
                record_ids: vec![record_id.to_string()],
            })
            .collect();
        self.apply(Op::Batch { ops })
    }

    pub fn dense_search(&self, q: &[f32], k: usize, filter: &SearchFilter) -> Vec<Hit> {
        self.read(|s| s.dense_search(q, k, filter))
    }

    pub fn sparse_search(&self, q: &BTreeMap<String, f32>, k: usize, filter: &SearchFilter) -> Vec<Hit> {
        self.read(|s| s.sparse_search(q, k, filter))
    }

    pub fn hybrid_search(
        &self,
        query: &str,
        k: usize,
        filter: &SearchFilter,
        embedder: &dyn Embedder,
        alpha: f64,
    ) -> Vec<HybridHit> {
        self.read(|s| s.hybrid_search(query, k, filter, embedder, alpha))
    }

    pub fn keyword_search(&self, query: &str, k: usize, embedder: &dyn Embedder, floor: f64) -> Vec<Hit> {
        self.read(|s| s.keyword_search(query, k, embedder, floor))
    }

    /// Removes expirable records (and their events) in one logged batch.
    pub fn expire(&self, now: i64) -> Result<Vec<String>, StoreError> {
        let ids = self.read(|s| s.expirable(now));
        if !ids.is_empty() {
            let ops = ids.iter().map(|id| Op::DeleteRecord { id: id.clone() }).collect();
            self.apply(Op::Batch { ops })?;
        }
        Ok(ids)
    }

    /// Writes a snapshot of the current state and truncates the log.
    pub fn snapshot(&self) -> Result<PathBuf, StoreError> {
        let dir = self.dir.clone().ok_or_else(|| StoreError::Invalid {
            id: String::new(),
            reason: "snapshot needs a data directory".into(),
        })?;
        let mut wal = self.wal.lock();
        let state = self.state.read().clone();
        let path = dir.join(SNAPSHOT_FILE);
        persist::write_snapshot(&path, &state)?;
        if let Some(w) = wal.as_mut() {
            w.reset()?;
        }
        Ok(path)
    }

    /// Exports a snapshot of the current state to an arbitrary path.
    pub fn export_snapshot(&self, path: &Path) -> Result<(), StoreError> {
        let state = self.state.read().clone();
        persist::write_snapshot(path, &state)
    }

    /// Reads a snapshot file into a fresh in-memory state. A missing path
    /// gives an empty state.
    pub fn load_snapshot(path: &Path, cfg: StoreConfig) -> Result<StoreState, StoreError> {
        let mut state = StoreState::new(&cfg);
        if path.exists() {
            persist::read_snapshot(path, &mut |op| state.apply(op))?;
        }
        Ok(state)
    }

    /// Replaces the data directory's contents with the snapshot at `path`.
    pub fn restore(dir: &Path, path: &Path, cfg: StoreConfig) -> Result<(Self, RecoveryReport), StoreError> {
        let state = Self::load_snapshot(path, cfg)?;
        std::fs::create_dir_all(dir)?;
        persist::write_snapshot(&dir.join(SNAPSHOT_FILE), &state)?;
        let wal = dir.join(WAL_FILE);
        if wal.exists() {
            std::fs::remove_file(wal)?;
        }
        Self::open(dir, cfg)
    }
}

/// Stoplist keyword heuristic: distinct tokens of three or more letters
/// that are not common function words, in first-seen order.
pub fn extract_keywords(text: &str) -> Vec<String> {
    const STOP: &[&str] = &[
        "the", "and", "for", "are", "but", "not", "you", "your", "yours", "with", "this", "that", "these",
        "those", "have", "has", "had", "was", "were", "been", "being", "from", "they", "them", "their",
        "there", "then", "than", "what", "when", "where", "which", "who", "whom", "why", "how", "all",
        "any", "can", "could", "would", "should", "will", "just", "about", "into", "over", "after",
        "before", "again", "also", "our", "ours", "out", "off", "too", "very", "its", "his", "her",
        "hers", "him", "she", "did", "does", "doing", "done", "get", "got", "let", "may", "might",
        "must", "now", "one", "only", "own", "same", "some", "such", "yes", "okay", "please", "thanks",
        "thank", "user", "assistant", "system", "tool", "like", "really", "want", "need", "know",
        "think", "remember", "tell", "said", "say", "sure", "well", "here", "because", "while",
    ];
    let mut seen = BTreeSet::new();
    crate::embed::tokenize(text)
        .into_iter()
        .filter(|t| t.chars().count() >= 3 && !t.chars().all(|c| c.is_ascii_digit()) && !STOP.contains(&t.as_str()))
        .filter(|t| seen.insert(t.clone()))
        .collect()
}
