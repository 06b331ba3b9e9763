//! The memory base: wires extraction, entity updates, consolidation,
//! compression and recall over one [`Store`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embed::Embedder;
use crate::eua::{apply_patches, EuaConfig, FieldOutcome, Patch};
use crate::extraction::{
    buffer_append, deduplicate_events, extract_one_pass, AppendOutcome, ExtractionConfig, SessionBuffer,
};
use crate::operators::{
    llm_merge, materialize, route_event, time_compress_tick, CompressionConfig, ConsolidationTask, TaskKind,
    TopicTimeline,
};
use crate::prompts::PromptTemplates;
use crate::provider::{LlmProvider, TokenUsage};
use crate::retrieval::{recall, rerank, RecallConfig, ScoredMemory};
use crate::schema::{normalize_group_key, validate_schema, EntityInstance, KEYWORDS_PROPERTY, MemorySchema, ValidationReport, Value, Violation};
use crate::segmentation::{Message, Role, Session};
use crate::store::{extract_keywords, MemoryRecord, Op, RecordKind, RecordMeta, SearchFilter, Store};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub extraction: ExtractionConfig,
    pub recall: RecallConfig,
    pub compression: CompressionConfig,
    pub eua: EuaConfig,
    /// Attempts after which a failing merge task is left parked in the queue.
    pub max_merge_attempts: u32,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            extraction: ExtractionConfig::default(),
            recall: RecallConfig::default(),
            compression: CompressionConfig::default(),
            eua: EuaConfig::default(),
            max_merge_attempts: 5,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        self.recall.validate()?;
        self.compression.validate()?;
        if self.extraction.flush_threshold == 0 {
            return Err(Error::Config("flush_threshold must be at least 1".into()));
        }
        Ok(())
    }
}

pub type Clock = Arc<dyn Fn() -> i64 + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as i64)
            .unwrap_or(0)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppendStatus {
    Buffered,
    Flushed,
    /// Already consumed by an earlier flush; ignored.
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppendResult {
    pub status: AppendStatus,
    pub buffered: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flush: Option<FlushReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlushReport {
    pub extraction_id: String,
    /// True when this batch was already committed; nothing was written.
    pub replayed: bool,
    pub event_ids: Vec<String>,
    pub patched_entities: Vec<String>,
    pub created_entities: Vec<String>,
    pub updated_entities: Vec<String>,
    pub patch_outcomes: Vec<FieldOutcome>,
    pub queued_merges: usize,
    pub warnings: Vec<String>,
    pub segmentation_usage: TokenUsage,
    pub extraction_usage: TokenUsage,
    /// Characters of stored memory text against the raw session text.
    pub stored_chars: usize,
    pub session_chars: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationReport {
    pub completed: Vec<u64>,
    pub failed: Vec<u64>,
    /// Tasks whose target changed while the merge ran; retried later.
    pub deferred: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompressReport {
    pub timelines: usize,
    pub summaries: Vec<String>,
    pub ttl_assigned: usize,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub version: String,
    pub schema_version: Option<u64>,
    pub records: usize,
    pub events: usize,
    pub entities: usize,
    pub keywords: usize,
    pub timelines: usize,
    pub queue_depth: usize,
    pub open_sessions: usize,
}

/// Deterministic extraction id for the first `messages` messages of a session.
pub fn extraction_id(session: &str, messages: usize) -> String {
    let mut h = Sha256::new();
    h.update(session.as_bytes());
    h.update([0]);
    h.update((messages as u64).to_le_bytes());
    format!("ext-{}", &hex::encode(h.finalize())[..16])
}

fn user_of(group_key: &str) -> Option<String> {
    group_key
        .split('|')
        .find_map(|p| p.strip_prefix("user="))
        .map(str::to_string)
}

fn split_timeline_id(id: &str) -> Option<(&str, &str, &str)> {
    let (entity_type, rest) = id.split_once('/')?;
    let (group_key, field) = rest.rsplit_once('/')?;
    Some((entity_type, group_key, field))
}

struct OpenSession {
    /// Session position of the first buffered message.
    base: usize,
    buffer: SessionBuffer,
}

pub struct MemoryBase {
    store: Store,
    embedder: Arc<dyn Embedder>,
    llm: Arc<dyn LlmProvider>,
    templates: PromptTemplates,
    cfg: EngineConfig,
    clock: Clock,
    sessions: Mutex<HashMap<String, OpenSession>>,
    flushing: Mutex<HashSet<String>>,
    // Serializes read-modify-write of entities, timelines and the queue.
    writer: Mutex<()>,
}

impl std::fmt::Debug for MemoryBase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryBase").field("store", &self.store).finish_non_exhaustive()
    }
}

impl MemoryBase {
    pub fn new(store: Store, embedder: Arc<dyn Embedder>, llm: Arc<dyn LlmProvider>, cfg: EngineConfig) -> Result<Self> {
        cfg.validate()?;
        if embedder.dim() != store.config().dim {
            return Err(Error::Config(format!(
                "embedder dim {} does not match store dim {}",
                embedder.dim(),
                store.config().dim
            )));
        }
        Ok(MemoryBase {
            store,
            embedder,
            llm,
            templates: PromptTemplates::default(),
            cfg,
            clock: system_clock(),
            sessions: Mutex::new(HashMap::new()),
            flushing: Mutex::new(HashSet::new()),
            writer: Mutex::new(()),
        })
    }

    pub fn with_templates(mut self, templates: PromptTemplates) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn now(&self) -> i64 {
        (self.clock)()
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn schema(&self) -> Option<MemorySchema> {
        self.store.read(|s| s.schema.clone())
    }

    /// Installs `schema` if it validates and its version is newer than the
    /// installed one. The report is returned either way.
    pub fn install_schema(&self, schema: MemorySchema) -> Result<ValidationReport> {
        let mut report = validate_schema(&schema);
        if let Some(cur) = self.store.read(|s| s.schema.as_ref().map(|s| s.version)) {
            if schema.version <= cur {
                report.violations.push(Violation {
                    path: "version".into(),
                    message: format!("version {} must exceed installed version {cur}", schema.version),
                });
            }
        }
        if report.is_valid() {
            self.store.apply(Op::InstallSchema { schema })?;
        }
        Ok(report)
    }

    /// Appends a message to the session buffer, flushing at the threshold.
    ///
    /// `index` is the message's position in the whole session. When given,
    /// messages already consumed by an earlier flush are acknowledged as
    /// duplicates, which makes client replays after a crash harmless.
    pub fn append_message(
        &self,
        session_id: &str,
        user: &str,
        role: Role,
        content: &str,
        timestamp: i64,
        index: Option<usize>,
    ) -> Result<AppendResult> {
        let outcome = {
            let mut sessions = self.sessions.lock();
            let buf = match sessions.entry(session_id.to_string()) {
                std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::hash_map::Entry::Vacant(e) => {
                    let base = self.store.read(|s| s.sessions.get(session_id).copied().unwrap_or(0));
                    e.insert(OpenSession {
                        base,
                        buffer: SessionBuffer::new(Session::new(session_id, user), self.cfg.extraction.flush_threshold),
                    })
                }
            };
            let next = buf.base + buf.buffer.session.messages.len();
            match index {
                Some(i) if i < next => {
                    return Ok(AppendResult {
                        status: AppendStatus::Duplicate,
                        buffered: buf.buffer.session.messages.len(),
                        flush: None,
                    })
                }
                Some(i) if i > next => return Err(Error::IndexGap { expected: next, got: i }),
                _ => {}
            }
            let msg = Message {
                index: buf.buffer.session.messages.len(),
                role,
                content: content.to_string(),
                timestamp,
            };
            (buffer_append(&mut buf.buffer, msg)?, buf.buffer.session.messages.len())
        };
        match outcome {
            (AppendOutcome::Buffered, n) => Ok(AppendResult {
                status: AppendStatus::Buffered,
                buffered: n,
                flush: None,
            }),
            (AppendOutcome::FlushTriggered, _) => {
                let report = self.flush(session_id)?;
                Ok(AppendResult {
                    status: AppendStatus::Flushed,
                    buffered: self.buffered(session_id).unwrap_or(0),
                    flush: Some(report),
                })
            }
        }
    }

    pub fn buffered(&self, session_id: &str) -> Option<usize> {
        self.sessions.lock().get(session_id).map(|b| b.buffer.session.messages.len())
    }

    /// Flushes sessions whose newest message is older than the idle timeout.
    pub fn flush_idle(&self) -> Vec<Result<FlushReport>> {
        let now = self.now();
        let idle: Vec<String> = self
            .sessions
            .lock()
            .iter()
            .filter(|(_, b)| {
                !b.buffer.session.messages.is_empty() && b.buffer.is_idle(now, self.cfg.extraction.idle_timeout_ms)
            })
            .map(|(id, _)| id.clone())
            .collect();
        idle.iter().map(|id| self.flush(id)).collect()
    }

    /// Runs the extraction pipeline over the buffered messages and commits
    /// everything it produces as one logged batch.
    pub fn flush(&self, session_id: &str) -> Result<FlushReport> {
        if !self.flushing.lock().insert(session_id.to_string()) {
            return Err(Error::FlushInProgress(session_id.to_string()));
        }
        let result = self.flush_inner(session_id);
        self.flushing.lock().remove(session_id);
        result
    }

    fn flush_inner(&self, session_id: &str) -> Result<FlushReport> {
        let (session, base) = self
            .sessions
            .lock()
            .get(session_id)
            .map(|b| (b.buffer.session.clone(), b.base))
            .ok_or_else(|| Error::UnknownSession(session_id.to_string()))?;
        let count = session.messages.len();
        let report = self.commit_session(&session, base)?;
        let mut sessions = self.sessions.lock();
        if let Some(open) = sessions.get_mut(session_id) {
            // Keep anything appended while the pipeline ran.
            let msgs = &mut open.buffer.session.messages;
            msgs.drain(..count.min(msgs.len()));
            for (i, m) in msgs.iter_mut().enumerate() {
                m.index = i;
            }
            open.base = base + count;
            open.buffer.last_flush_at = self.now();
        }
        Ok(report)
    }

    /// Runs the full offline pipeline on a complete session. Messages that
    /// earlier flushes of the same session id already consumed are skipped.
    pub fn ingest_session(&self, session: &Session) -> Result<FlushReport> {
        session.check().map_err(|e| Error::Config(format!("invalid session: {e}")))?;
        if !self.flushing.lock().insert(session.id.clone()) {
            return Err(Error::FlushInProgress(session.id.clone()));
        }
        let offset = self.store.read(|s| s.sessions.get(&session.id).copied().unwrap_or(0));
        let result = if offset >= session.messages.len() {
            Ok(FlushReport {
                extraction_id: extraction_id(&session.id, session.messages.len()),
                replayed: true,
                ..Default::default()
            })
        } else {
            let mut rest = session.clone();
            rest.messages.drain(..offset);
            for (i, m) in rest.messages.iter_mut().enumerate() {
                m.index = i;
            }
            self.commit_session(&rest, offset)
        };
        self.flushing.lock().remove(&session.id);
        result
    }

    /// Extracts and commits `session`, whose first message sits at position
    /// `offset` of the whole session.
    fn commit_session(&self, session: &Session, offset: usize) -> Result<FlushReport> {
        let schema = self.schema().ok_or(Error::NoSchema)?;
        let total = offset + session.messages.len();
        let ext_id = extraction_id(&session.id, total);
        let session_chars = session.messages.iter().map(|m| m.content.chars().count()).sum();
        if session.messages.is_empty() || self.store.read(|s| s.extractions.contains(&ext_id)) {
            return Ok(FlushReport {
                extraction_id: ext_id,
                replayed: !session.messages.is_empty(),
                session_chars,
                ..Default::default()
            });
        }

        let snapshot = self.store.state();
        let extracted = extract_one_pass(
            session,
            &schema,
            &snapshot,
            self.embedder.as_ref(),
            self.llm.as_ref(),
            &self.templates,
            &self.cfg.extraction,
        )?;
        drop(snapshot);
        let dedup_llm = self
            .cfg
            .extraction
            .llm_dedup
            .then(|| (self.llm.as_ref(), &schema, &self.templates));
        let mut events = deduplicate_events(
            extracted.events,
            self.embedder.as_ref(),
            self.cfg.extraction.dedup_threshold,
            dedup_llm,
        );
        for (i, ev) in events.iter_mut().enumerate() {
            ev.id = format!("{ext_id}-e{i}");
        }

        let now = self.now();
        let mut report = FlushReport {
            extraction_id: ext_id.clone(),
            warnings: extracted.warnings,
            segmentation_usage: extracted.segmentation_usage,
            extraction_usage: extracted.extraction_usage,
            session_chars,
            ..Default::default()
        };
        let mut ops = Vec::new();
        for ev in &events {
            let def = schema.event(&ev.event_type);
            let weight = def
                .and_then(|d| d.instance_weight_field.as_ref())
                .and_then(|f| ev.properties.get(f))
                .and_then(Value::as_f64);
            let text = ev.render_text();
            report.stored_chars += text.chars().count();
            let record = MemoryRecord::from_text(
                ev.id.clone(),
                RecordKind::Event,
                text.clone(),
                RecordMeta {
                    type_name: ev.event_type.clone(),
                    timestamp: ev.timestamp,
                    user: ev.user.clone(),
                    topic: ev.topic.clone(),
                    instance_weight: weight,
                },
                self.embedder.as_ref(),
            );
            ops.push(Op::PutEvent { event: ev.clone() });
            ops.push(Op::UpsertRecord { record });
            for kw in keywords_for(ev) {
                ops.push(Op::KeywordLink {
                    keyword: kw,
                    record_ids: vec![ev.id.clone()],
                });
            }
            report.event_ids.push(ev.id.clone());
        }

        let bindings: Vec<_> = events.iter().flat_map(|e| route_event(e, &schema)).collect();
        let _w = self.writer.lock();
        let state = self.store.state();
        let mut entities = state.entities.clone();
        let mat = materialize(&bindings, &mut entities, &schema, now);
        report.warnings.extend(mat.errors.iter().cloned());
        report.created_entities = mat.created.clone();
        report.updated_entities = mat.updated.clone();
        let mut touched: BTreeSet<String> = mat.created.iter().chain(&mat.updated).cloned().collect();

        let mut by_entity: BTreeMap<(String, String), Vec<(String, Patch)>> = BTreeMap::new();
        for p in extracted.entity_patches {
            by_entity
                .entry((p.entity_type, p.group_key))
                .or_default()
                .push((p.field, p.patch));
        }
        let mut patched_fields: HashSet<(String, String, String)> = HashSet::new();
        for ((entity_type, group_key), patches) in by_entity {
            let Some(def) = schema.entity(&entity_type) else {
                continue;
            };
            let id = EntityInstance::entity_id(&entity_type, &group_key);
            let mut entity = entities
                .get(&id)
                .cloned()
                .unwrap_or_else(|| EntityInstance::genesis(def, &group_key, now));
            match apply_patches(&mut entity, &patches, &schema, &self.cfg.eua, now) {
                Ok(outcomes) => {
                    for (field, _) in &patches {
                        patched_fields.insert((entity_type.clone(), group_key.clone(), field.clone()));
                    }
                    report.patch_outcomes.extend(outcomes);
                    report.patched_entities.push(id.clone());
                    entities.insert(id.clone(), entity);
                    touched.insert(id);
                }
                Err(e) => report.warnings.push(format!("patch on {id}: {e}")),
            }
        }

        let mut next_task = state.next_task_id();
        for kind in mat.merge_requests {
            let TaskKind::Merge {
                entity_type,
                group_key,
                field,
                ..
            } = &kind;
            if patched_fields.contains(&(entity_type.clone(), group_key.clone(), field.clone())) {
                continue;
            }
            ops.push(Op::Enqueue {
                task: ConsolidationTask {
                    id: next_task,
                    kind,
                    attempts: 0,
                },
            });
            next_task += 1;
            report.queued_merges += 1;
        }

        let mut timelines: BTreeMap<String, TopicTimeline> = BTreeMap::new();
        for (tl_id, event_id, ts) in mat.timeline_appends {
            let tl = timelines.entry(tl_id.clone()).or_insert_with(|| {
                state.timelines.get(&tl_id).cloned().unwrap_or_else(|| {
                    let topic = split_timeline_id(&tl_id)
                        .map(|(_, gk, field)| format!("{field} of {gk}"))
                        .unwrap_or_else(|| tl_id.clone());
                    TopicTimeline::new(tl_id.clone(), topic)
                })
            });
            tl.append(&event_id, ts);
        }
        ops.extend(timelines.into_values().map(|timeline| Op::PutTimeline { timeline }));

        for id in &touched {
            let entity = &entities[id];
            report.stored_chars += entity.render_text().chars().count();
            ops.push(Op::PutEntity { entity: entity.clone() });
            ops.push(Op::UpsertRecord {
                record: self.entity_record(entity),
            });
        }
        ops.push(Op::MarkExtraction { id: ext_id });
        ops.push(Op::SessionProgress {
            session: session.id.clone(),
            messages: total,
        });
        self.store.apply(Op::Batch { ops })?;
        Ok(report)
    }

    fn entity_record(&self, entity: &EntityInstance) -> MemoryRecord {
        MemoryRecord::from_text(
            entity.id.clone(),
            RecordKind::Entity,
            entity.render_text(),
            RecordMeta {
                type_name: entity.entity_type.clone(),
                timestamp: entity.updated_at,
                user: user_of(&entity.group_key),
                topic: None,
                instance_weight: None,
            },
            self.embedder.as_ref(),
        )
    }

    pub fn get_entity(&self, entity_type: &str, group_key: &str) -> Result<EntityInstance> {
        let id = EntityInstance::entity_id(entity_type, &normalize_group_key(group_key));
        self.store
            .read(|s| s.entities.get(&id).cloned())
            .ok_or_else(|| Error::UnknownEntity {
                entity_type: entity_type.to_string(),
                group_key: group_key.to_string(),
            })
    }

    /// Recall, rerank, then reinforce any summarized event the query touched.
    pub fn search(&self, query: &str, cfg: &RecallConfig, filter: &SearchFilter) -> Result<Vec<ScoredMemory>> {
        let now = self.now();
        let hits = self.store.read(|state| -> Result<_> {
            let candidates = recall(query, cfg, state, self.embedder.as_ref(), filter, now)?;
            Ok(rerank(query, candidates, state, self.embedder.as_ref(), cfg))
        })?;
        let touched: Vec<Op> = self.store.read(|s| {
            hits.iter()
                .filter(|h| s.records.get(&h.id).is_some_and(|r| r.covered_by.is_some()))
                .map(|h| Op::Reinforce {
                    record_id: h.id.clone(),
                    at: now,
                })
                .collect()
        });
        if !touched.is_empty() {
            self.store.apply(Op::Batch { ops: touched })?;
        }
        Ok(hits)
    }

    /// Processes up to `limit` queued merges, oldest first.
    pub fn run_consolidation(&self, limit: usize) -> Result<ConsolidationReport> {
        let mut report = ConsolidationReport::default();
        let tasks: Vec<ConsolidationTask> = self.store.read(|s| {
            s.queue
                .values()
                .filter(|t| t.attempts < self.cfg.max_merge_attempts)
                .take(limit)
                .cloned()
                .collect()
        });
        for task in tasks {
            let TaskKind::Merge {
                entity_type,
                group_key,
                field,
                items,
            } = &task.kind;
            let id = EntityInstance::entity_id(entity_type, group_key);
            let Some(entity) = self.store.read(|s| s.entities.get(&id).cloned()) else {
                // The entity is gone; nothing to merge into.
                self.store.apply(Op::Complete { task_id: task.id })?;
                report.completed.push(task.id);
                continue;
            };
            let old = entity.properties.get(field).and_then(Value::as_str).unwrap_or_default().to_string();
            match llm_merge(field, &old, items, self.llm.as_ref(), &self.templates) {
                Ok((merged, _)) => {
                    let _w = self.writer.lock();
                    let Some(mut current) = self.store.read(|s| s.entities.get(&id).cloned()) else {
                        continue;
                    };
                    if current.properties.get(field).and_then(Value::as_str).unwrap_or_default() != old {
                        report.deferred.push(task.id);
                        continue;
                    }
                    current.properties.insert(field.clone(), Value::String(merged));
                    current.version += 1;
                    current.updated_at = self.now();
                    let record = self.entity_record(&current);
                    self.store.apply(Op::Batch {
                        ops: vec![
                            Op::PutEntity { entity: current },
                            Op::UpsertRecord { record },
                            Op::Complete { task_id: task.id },
                        ],
                    })?;
                    report.completed.push(task.id);
                }
                Err(e) => {
                    tracing::warn!(task = task.id, "merge failed: {e}");
                    self.store.apply(Op::Enqueue {
                        task: ConsolidationTask {
                            attempts: task.attempts + 1,
                            ..task.clone()
                        },
                    })?;
                    report.failed.push(task.id);
                }
            }
        }
        Ok(report)
    }

    pub fn queue_depth(&self) -> usize {
        self.store.read(|s| s.queue.len())
    }

    /// One compression tick over every timeline.
    pub fn compress(&self) -> Result<CompressReport> {
        let now = self.now();
        let mut report = CompressReport::default();
        let timelines: Vec<TopicTimeline> = self.store.read(|s| s.timelines.values().cloned().collect());
        for tl in timelines {
            report.timelines += 1;
            let state = self.store.state();
            let text = |id: &str| state.events.get(id).map(|e| e.render_text());
            let outcome =
                match time_compress_tick(&tl, now, &self.cfg.compression, self.llm.as_ref(), &self.templates, &text) {
                    Ok(o) => o,
                    Err(e) => {
                        report.errors.push(format!("{}: {e}", tl.id));
                        continue;
                    }
                };
            if outcome.summaries.is_empty() {
                continue;
            }
            let _w = self.writer.lock();
            let state = self.store.state();
            if state.timelines.get(&tl.id) != Some(&tl) {
                report.errors.push(format!("{}: timeline changed during compression, skipped", tl.id));
                continue;
            }
            let mut ops = Vec::new();
            let deadline: HashMap<&str, i64> =
                outcome.ttl_assignments.iter().map(|(id, d)| (id.as_str(), *d)).collect();
            for s in &outcome.summaries {
                let type_name = split_timeline_id(&tl.id).map_or("Summary", |(et, _, _)| et).to_string();
                let user = split_timeline_id(&tl.id).and_then(|(_, gk, _)| user_of(gk));
                ops.push(Op::UpsertRecord {
                    record: MemoryRecord::from_text(
                        s.id.clone(),
                        RecordKind::Summary,
                        format!("{} ({}): {}", tl.topic, s.label, s.text),
                        RecordMeta {
                            type_name,
                            timestamp: s.window_end - 1,
                            user,
                            topic: Some(tl.topic.clone()),
                            instance_weight: None,
                        },
                        self.embedder.as_ref(),
                    ),
                });
                for eid in &s.event_ids {
                    if let Some(mut r) = state.records.get(eid).cloned() {
                        r.ttl_deadline = deadline.get(eid.as_str()).copied();
                        r.covered_by = Some(s.id.clone());
                        ops.push(Op::UpsertRecord { record: r });
                    }
                    if let Some(mut e) = state.events.get(eid).cloned() {
                        e.ttl_deadline = deadline.get(eid.as_str()).copied();
                        ops.push(Op::PutEvent { event: e });
                    }
                }
                report.summaries.push(s.id.clone());
            }
            report.ttl_assigned += outcome.ttl_assignments.len();
            if let Some((et, gk, field)) = split_timeline_id(&tl.id) {
                let id = EntityInstance::entity_id(et, gk);
                if let Some(mut entity) = state.entities.get(&id).cloned() {
                    let digest = outcome
                        .timeline
                        .summaries
                        .iter()
                        .map(|s| format!("{}: {}", s.label, s.text))
                        .collect::<Vec<_>>()
                        .join("\n");
                    entity.properties.insert(field.to_string(), Value::String(digest));
                    entity.version += 1;
                    entity.updated_at = now;
                    ops.push(Op::UpsertRecord {
                        record: self.entity_record(&entity),
                    });
                    ops.push(Op::PutEntity { entity });
                }
            }
            ops.push(Op::PutTimeline {
                timeline: outcome.timeline,
            });
            self.store.apply(Op::Batch { ops })?;
        }
        Ok(report)
    }

    pub fn expire(&self) -> Result<Vec<String>> {
        let _w = self.writer.lock();
        Ok(self.store.expire(self.now())?)
    }

    pub fn health(&self) -> Health {
        let open_sessions = self
            .sessions
            .lock()
            .values()
            .filter(|b| !b.buffer.session.messages.is_empty())
            .count();
        self.store.read(|s| Health {
            version: env!("CARGO_PKG_VERSION").to_string(),
            schema_version: s.schema.as_ref().map(|s| s.version),
            records: s.records.len(),
            events: s.events.len(),
            entities: s.entities.len(),
            keywords: s.keywords.len(),
            timelines: s.timelines.len(),
            queue_depth: s.queue.len(),
            open_sessions,
        })
    }
}

/// Graph keywords: the stoplist heuristic over the text, plus the values of
/// any property named `keywords`.
/// Keywords from property values (not the type or property names) plus the
/// `keywords` property, split on `,` or `;`.
fn keywords_for(ev: &crate::schema::EventInstance) -> Vec<String> {
    let values: Vec<String> = ev
        .properties
        .iter()
        .filter(|(k, _)| k.as_str() != KEYWORDS_PROPERTY)
        .map(|(_, v)| v.render())
        .collect();
    let mut out = extract_keywords(&values.join(" "));
    if let Some(Value::String(s)) = ev.properties.get(KEYWORDS_PROPERTY) {
        for k in s.split([',', ';']) {
            let k = k.trim().to_lowercase();
            if !k.is_empty() && !out.contains(&k) {
                out.push(k);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
