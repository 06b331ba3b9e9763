//! Event to entity materialization: routing through aggregate expressions,
//! statistical folds, LLM merges, and windowed timeline compression.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::prompts::{final_answer, render, PromptTemplates};
use crate::provider::{CompletionParams, LlmProvider, ProviderError, TokenUsage};
use crate::schema::{
    canonical_group_key, AggregateOp, EntityInstance, EventInstance, MemorySchema, PropType, Value,
};
use crate::{Error, Result};

pub const DAY_MS: i64 = 86_400_000;
pub const WEEK_MS: i64 = 7 * DAY_MS;
/// Monday 1970-01-05 00:00 UTC; windows are aligned to it.
pub const WINDOW_ANCHOR_MS: i64 = 4 * DAY_MS;

/// One event value headed for one entity field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingBinding {
    pub entity_type: String,
    pub group_key: String,
    pub field: String,
    pub op: AggregateOp,
    pub source_value: Value,
    pub event_id: String,
    pub timestamp: i64,
}

/// Evaluates every aggregate expression against one event.
pub fn route_event(ev: &EventInstance, schema: &MemorySchema) -> Vec<RoutingBinding> {
    let mut out = Vec::new();
    for ent in &schema.entities {
        for p in &ent.properties {
            let agg = &p.aggregate;
            if agg.source_event_type != ev.event_type {
                continue;
            }
            let Some(value) = ev.properties.get(&agg.source_property) else {
                continue;
            };
            if let Some(f) = &agg.filters {
                if let Some(w) = &f.time_window {
                    if !w.contains(ev.timestamp) {
                        continue;
                    }
                }
                let equal = f
                    .equals
                    .iter()
                    .all(|(k, want)| ev.group_value(k).as_deref() == Some(want.render().as_str()));
                if !equal {
                    continue;
                }
            }
            let mut pairs = Vec::with_capacity(agg.group_by.len());
            let mut resolved = true;
            for key in &agg.group_by {
                match ev.group_value(key) {
                    Some(v) => pairs.push((key.as_str(), v)),
                    None => {
                        resolved = false;
                        break;
                    }
                }
            }
            if !resolved {
                tracing::warn!(event = %ev.id, entity = %ent.entity_type, "group key unresolved; binding skipped");
                continue;
            }
            out.push(RoutingBinding {
                entity_type: ent.entity_type.clone(),
                group_key: canonical_group_key(pairs),
                field: p.property.name.clone(),
                op: agg.op,
                source_value: value.clone(),
                event_id: ev.id.clone(),
                timestamp: ev.timestamp,
            });
        }
    }
    out
}

fn numeric_value(target: Option<PropType>, n: f64) -> Value {
    if target == Some(PropType::Integer) && n.fract() == 0.0 && n.abs() < 9.0e15 {
        Value::Integer(n as i64)
    } else {
        Value::Number(n)
    }
}

/// Applies one SUM/COUNT/MAX/AVG step in place. `target` is the declared
/// type of the entity field, used to keep integer fields integral.
pub fn apply_statistical(
    op: AggregateOp,
    entity: &mut EntityInstance,
    field: &str,
    value: &Value,
    target: Option<PropType>,
) -> Result<()> {
    let current = entity.properties.get(field).and_then(Value::as_f64);
    let need = |name: &'static str| {
        value.as_f64().ok_or_else(|| Error::NonNumeric {
            op: name,
            field: field.to_string(),
        })
    };
    let next = match op {
        AggregateOp::Count => numeric_value(target, current.unwrap_or(0.0) + 1.0),
        AggregateOp::Sum => {
            let v = need("SUM")?;
            match (entity.properties.get(field), value) {
                (Some(Value::Integer(a)), Value::Integer(b)) if target == Some(PropType::Integer) => {
                    Value::Integer(a + b)
                }
                _ => numeric_value(target, current.unwrap_or(0.0) + v),
            }
        }
        AggregateOp::Max => {
            let v = need("MAX")?;
            match current {
                Some(c) if c >= v => return bump(entity),
                _ => numeric_value(target, v),
            }
        }
        AggregateOp::Avg => {
            let v = need("AVG")?;
            let acc = entity.accumulators.entry(field.to_string()).or_default();
            acc.sum += v;
            acc.count += 1;
            Value::Number(acc.sum / acc.count as f64)
        }
        AggregateOp::LlmMerge | AggregateOp::TimeCompress => {
            return Err(Error::Config(format!("{op} is not a statistical operator")))
        }
    };
    entity.properties.insert(field.to_string(), next);
    bump(entity)
}

fn bump(entity: &mut EntityInstance) -> Result<()> {
    entity.version += 1;
    Ok(())
}

/// One LLM call merging new items into a field value.
pub fn llm_merge(
    field: &str,
    old: &str,
    new_items: &[String],
    llm: &dyn LlmProvider,
    templates: &PromptTemplates,
) -> std::result::Result<(String, TokenUsage), ProviderError> {
    let items = new_items
        .iter()
        .map(|i| format!("- {i}"))
        .collect::<Vec<_>>()
        .join("\n");
    let old_text = if old.is_empty() { "(empty)" } else { old };
    let prompt = render(
        &templates.merge,
        &[("field", field), ("old", old_text), ("items", &items)],
    );
    let c = llm.complete(&prompt, &CompletionParams::for_purpose("merge"))?;
    Ok((final_answer(&c.text), c.usage))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub window_ms: i64,
    pub inactivity_threshold_ms: i64,
    pub ttl_after_summary_ms: i64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            window_ms: WEEK_MS,
            inactivity_threshold_ms: WEEK_MS,
            ttl_after_summary_ms: 4 * WEEK_MS,
        }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_ms <= 0 || self.inactivity_threshold_ms <= 0 || self.ttl_after_summary_ms <= 0 {
            return Err(Error::Config("compression durations must be positive".into()));
        }
        Ok(())
    }

    /// Index of the window containing `ts`.
    pub fn window_index(&self, ts: i64) -> i64 {
        (ts - WINDOW_ANCHOR_MS).div_euclid(self.window_ms)
    }

    pub fn window_start(&self, index: i64) -> i64 {
        WINDOW_ANCHOR_MS + index * self.window_ms
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineEntry {
    pub event_id: String,
    pub timestamp: i64,
    #[serde(default)]
    pub summary_id: Option<String>,
    #[serde(default)]
    pub ttl_deadline: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub id: String,
    pub label: String,
    pub window_start: i64,
    pub window_end: i64,
    pub text: String,
    pub created_at: i64,
    pub event_ids: Vec<String>,
}

/// Events on one topic in time order, plus the summaries covering old windows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicTimeline {
    pub id: String,
    pub topic: String,
    pub events: Vec<TimelineEntry>,
    pub last_active: i64,
    pub summaries: Vec<WindowSummary>,
}

impl TopicTimeline {
    pub fn new(id: impl Into<String>, topic: impl Into<String>) -> Self {
        TopicTimeline {
            id: id.into(),
            topic: topic.into(),
            events: Vec::new(),
            last_active: 0,
            summaries: Vec::new(),
        }
    }

    /// Inserts keeping timestamp order; a repeated event id is ignored.
    pub fn append(&mut self, event_id: &str, timestamp: i64) {
        if self.events.iter().any(|e| e.event_id == event_id) {
            return;
        }
        let pos = self.events.partition_point(|e| e.timestamp <= timestamp);
        self.events.insert(
            pos,
            TimelineEntry {
                event_id: event_id.to_string(),
                timestamp,
                summary_id: None,
                ttl_deadline: None,
            },
        );
        self.last_active = self.last_active.max(timestamp);
    }

    pub fn is_inactive(&self, now: i64, cfg: &CompressionConfig) -> bool {
        now - self.last_active > cfg.inactivity_threshold_ms
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickOutcome {
    pub timeline: TopicTimeline,
    pub summaries: Vec<WindowSummary>,
    pub ttl_assignments: Vec<(String, i64)>,
    pub usage: TokenUsage,
}

fn format_ts(ms: i64) -> String {
    let days = ms.div_euclid(DAY_MS);
    // Civil-from-days (proleptic Gregorian).
    let z = days + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = yoe + era * 400 + i64::from(m <= 2);
    format!("{y:04}-{m:02}-{d:02}")
}

fn summary_id(timeline: &str, window_start: i64, ids: &[String]) -> String {
    let mut h = Sha256::new();
    h.update(timeline.as_bytes());
    h.update(window_start.to_le_bytes());
    for id in ids {
        h.update(id.as_bytes());
        h.update([0]);
    }
    format!("sum-{}", &hex::encode(h.finalize())[..16])
}

/// Summarizes un-summarized events from closed windows of an inactive
/// timeline. Nothing changes unless every provider call succeeds.
pub fn time_compress_tick(
    timeline: &TopicTimeline,
    now: i64,
    cfg: &CompressionConfig,
    llm: &dyn LlmProvider,
    templates: &PromptTemplates,
    event_text: &dyn Fn(&str) -> Option<String>,
) -> std::result::Result<TickOutcome, ProviderError> {
    let mut next = timeline.clone();
    let unchanged = |t: TopicTimeline| TickOutcome {
        timeline: t,
        summaries: Vec::new(),
        ttl_assignments: Vec::new(),
        usage: TokenUsage::default(),
    };
    if timeline.events.is_empty() || !timeline.is_inactive(now, cfg) {
        return Ok(unchanged(next));
    }
    let current = cfg.window_index(now);
    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, e) in timeline.events.iter().enumerate() {
        let w = cfg.window_index(e.timestamp);
        if e.summary_id.is_none() && w < current {
            groups.entry(w).or_default().push(i);
        }
    }

    let mut summaries = Vec::new();
    let mut ttl = Vec::new();
    let mut usage = TokenUsage::default();
    let deadline = now + cfg.ttl_after_summary_ms;
    for (w, idx) in groups {
        let start = cfg.window_start(w);
        let end = start + cfg.window_ms;
        let label = format!("{}..{}", format_ts(start), format_ts(end - 1));
        let lines = idx
            .iter()
            .map(|&i| {
                let e = &timeline.events[i];
                let text = event_text(&e.event_id).unwrap_or_else(|| e.event_id.clone());
                format!("{} {}", format_ts(e.timestamp), text)
            })
            .collect::<Vec<_>>()
            .join("\n");
        let prompt = render(
            &templates.compress,
            &[("topic", &timeline.topic), ("window", &label), ("events", &lines)],
        );
        let c = llm.complete(&prompt, &CompletionParams::for_purpose("compress"))?;
        usage.prompt_tokens += c.usage.prompt_tokens;
        usage.completion_tokens += c.usage.completion_tokens;
        let event_ids: Vec<String> = idx.iter().map(|&i| timeline.events[i].event_id.clone()).collect();
        let id = summary_id(&timeline.id, start, &event_ids);
        for &i in &idx {
            let e = &mut next.events[i];
            e.summary_id = Some(id.clone());
            e.ttl_deadline = Some(deadline);
            ttl.push((e.event_id.clone(), deadline));
        }
        summaries.push(WindowSummary {
            id,
            label,
            window_start: start,
            window_end: end,
            text: final_answer(&c.text),
            created_at: now,
            event_ids,
        });
    }
    next.summaries.extend(summaries.iter().cloned());
    Ok(TickOutcome {
        timeline: next,
        summaries,
        ttl_assignments: ttl,
        usage,
    })
}

/// Clears a recalled event's TTL and marks the timeline active.
pub fn reinforce(timeline: &TopicTimeline, event_id: &str, now: i64) -> Result<TopicTimeline> {
    let mut next = timeline.clone();
    let entry = next
        .events
        .iter_mut()
        .find(|e| e.event_id == event_id)
        .ok_or_else(|| Error::UnknownEvent(event_id.to_string()))?;
    entry.ttl_deadline = None;
    next.last_active = next.last_active.max(now);
    Ok(next)
}

/// Deferred work for the consolidation worker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Merge {
        entity_type: String,
        group_key: String,
        field: String,
        items: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsolidationTask {
    pub id: u64,
    pub kind: TaskKind,
    #[serde(default)]
    pub attempts: u32,
}

pub fn timeline_id(entity_type: &str, group_key: &str, field: &str) -> String {
    format!("{entity_type}/{group_key}/{field}")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaterializeReport {
    pub created: Vec<String>,
    pub updated: Vec<String>,
    pub merge_requests: Vec<TaskKind>,
    pub timeline_appends: Vec<(String, String, i64)>,
    pub errors: Vec<String>,
}

/// Folds bindings into `entities` (keyed by entity id). Statistical ops are
/// applied now in timestamp order; LLM merges come back as requests and
/// TIME_COMPRESS values as timeline appends for the caller to persist.
pub fn materialize(
    bindings: &[RoutingBinding],
    entities: &mut BTreeMap<String, EntityInstance>,
    schema: &MemorySchema,
    now: i64,
) -> MaterializeReport {
    let mut report = MaterializeReport::default();
    let mut ordered: Vec<&RoutingBinding> = bindings.iter().collect();
    ordered.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.event_id.cmp(&b.event_id)));

    let mut merges: BTreeMap<(String, String, String), Vec<String>> = BTreeMap::new();
    for b in ordered {
        let Some(def) = schema.entity(&b.entity_type) else {
            report.errors.push(format!("unknown entity type {}", b.entity_type));
            continue;
        };
        let id = EntityInstance::entity_id(&b.entity_type, &b.group_key);
        if !entities.contains_key(&id) {
            entities.insert(id.clone(), EntityInstance::genesis(def, &b.group_key, now));
            report.created.push(id.clone());
        }
        match b.op {
            AggregateOp::LlmMerge => {
                merges
                    .entry((b.entity_type.clone(), b.group_key.clone(), b.field.clone()))
                    .or_default()
                    .push(b.source_value.render());
            }
            AggregateOp::TimeCompress => {
                report.timeline_appends.push((
                    timeline_id(&b.entity_type, &b.group_key, &b.field),
                    b.event_id.clone(),
                    b.timestamp,
                ));
            }
            op => {
                let target = def.property(&b.field).map(|p| p.property.prop_type);
                let entity = entities.get_mut(&id).expect("inserted above");
                match apply_statistical(op, entity, &b.field, &b.source_value, target) {
                    Ok(()) => {
                        entity.updated_at = now;
                        if !report.updated.contains(&id) && !report.created.contains(&id) {
                            report.updated.push(id.clone());
                        }
                    }
                    Err(e) => report.errors.push(format!("{}: {e}", b.event_id)),
                }
            }
        }
    }
    report.merge_requests = merges
        .into_iter()
        .map(|((entity_type, group_key, field), items)| TaskKind::Merge {
            entity_type,
            group_key,
            field,
            items,
        })
        .collect();
    report
}
