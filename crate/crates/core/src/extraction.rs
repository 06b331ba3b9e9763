//! Session buffering, one-pass extraction, and intra-session event dedup.

use serde::{Deserialize, Serialize};

use crate::embed::{dot, Embedder};
use crate::eua::{parse_patch, Patch, SEARCH_MARKER, DIVIDER_MARKER, REPLACE_MARKER};
use crate::prompts::{render, strip_code_fence, strip_trailing_commas, PromptTemplates};
use crate::provider::{CompletionParams, LlmProvider, TokenUsage};
use crate::schema::{
    conform_event, normalize_group_key, EntityInstance, EventInstance, MemorySchema, PropType,
};
use crate::segmentation::{apply_segment_plan, plan_segments, Message, Segment, Session};
use crate::store::{RecordKind, SearchFilter, StoreState};
use crate::{Error, Result};

pub const NO_ENTITIES_MARKER: &str = "no existing entities";
pub const SEGMENTS_HEADING: &str = "## Session segments";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub flush_threshold: usize,
    pub idle_timeout_ms: i64,
    pub candidate_cap: usize,
    pub dedup_threshold: f32,
    pub llm_dedup: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            flush_threshold: 20,
            idle_timeout_ms: 30 * 60 * 1000,
            candidate_cap: 5,
            dedup_threshold: 0.9,
            llm_dedup: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppendOutcome {
    Buffered,
    FlushTriggered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionBuffer {
    pub session: Session,
    pub flush_threshold: usize,
    pub last_flush_at: i64,
}

impl SessionBuffer {
    pub fn new(session: Session, flush_threshold: usize) -> Self {
        SessionBuffer {
            session,
            flush_threshold,
            last_flush_at: 0,
        }
    }

    /// Idle when the newest message is older than `timeout_ms`.
    pub fn is_idle(&self, now: i64, timeout_ms: i64) -> bool {
        self.session
            .last_timestamp()
            .is_some_and(|t| now - t > timeout_ms)
    }
}

/// Appends one message; reports a flush once the threshold is reached.
pub fn buffer_append(buf: &mut SessionBuffer, msg: Message) -> Result<AppendOutcome> {
    let expected = buf.session.messages.len();
    if msg.index != expected {
        return Err(Error::IndexGap {
            expected,
            got: msg.index,
        });
    }
    buf.session.messages.push(msg);
    Ok(if buf.session.messages.len() >= buf.flush_threshold {
        AppendOutcome::FlushTriggered
    } else {
        AppendOutcome::Buffered
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityPatch {
    pub entity_type: String,
    pub group_key: String,
    pub field: String,
    pub patch: Patch,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub events: Vec<EventInstance>,
    pub entity_patches: Vec<EntityPatch>,
    pub raw_reply: String,
    pub warnings: Vec<String>,
    pub segmentation_usage: TokenUsage,
    pub extraction_usage: TokenUsage,
    pub extraction_calls: u32,
    pub segments: Vec<Segment>,
}

fn render_event_defs(schema: &MemorySchema, only: Option<&str>, out: &mut String) {
    for ev in schema.events.iter().filter(|e| only.map_or(true, |o| o == e.event_type)) {
        out.push_str(&format!("Event type {}: {}\n", ev.event_type, ev.description));
        for p in &ev.properties {
            out.push_str(&format!("  - {} ({}): {}\n", p.name, p.prop_type, p.description));
        }
    }
}

fn render_entity_defs(schema: &MemorySchema, only: Option<&str>, out: &mut String) {
    for ent in schema.entities.iter().filter(|e| only.map_or(true, |o| o == e.entity_type)) {
        out.push_str(&format!("Entity type {}: {}\n", ent.entity_type, ent.description));
        for p in &ent.properties {
            let how = if p.property.prop_type == PropType::String {
                "update with a patch"
            } else {
                "computed, do not update"
            };
            out.push_str(&format!(
                "  - {} ({}, {how}): {}\n",
                p.property.name, p.property.prop_type, p.property.description
            ));
        }
    }
}

fn output_format(with_events: bool, with_entities: bool) -> String {
    let mut s = String::from("## Output format\nReply with one JSON object and nothing else:\n");
    s.push_str("{\"events\": [{\"event_type\": \"...\", \"properties\": {...}}],\n");
    s.push_str(" \"entity_updates\": [{\"entity_type\": \"...\", \"group_key\": \"user=...\", \"field\": \"...\", \"patch\": \"...\"}]}\n");
    if !with_events {
        s.push_str("Leave \"events\" empty.\n");
    }
    if with_entities {
        s.push_str(&format!(
            "Each patch edits one text field. Copy the text to change from the current value, then give its replacement:\n{SEARCH_MARKER}\n<text copied from the current value>\n{DIVIDER_MARKER}\n<replacement text>\n{REPLACE_MARKER}\nLeave the search part empty to fill an empty field.\n"
        ));
    } else {
        s.push_str("Leave \"entity_updates\" empty.\n");
    }
    s
}

fn render_segments(segments: &[Segment], out: &mut String) {
    out.push_str(SEGMENTS_HEADING);
    out.push('\n');
    for (i, seg) in segments.iter().enumerate() {
        out.push_str(&format!("### Segment {} (topic: {})\n{}\n", i + 1, seg.topic, seg.text));
    }
}

fn render_candidates(candidates: &[EntityInstance], cap: usize, only: Option<&str>, out: &mut String) {
    out.push_str("## Existing entities\n");
    let shown: Vec<&EntityInstance> = candidates
        .iter()
        .filter(|c| only.map_or(true, |o| o == c.entity_type))
        .take(cap)
        .collect();
    if shown.is_empty() {
        out.push_str(NO_ENTITIES_MARKER);
        out.push('\n');
    }
    for c in shown {
        out.push_str(&format!("{} [{}]\n", c.entity_type, c.group_key));
        for (k, v) in &c.properties {
            out.push_str(&format!("  {k}: {}\n", v.render()));
        }
    }
}

/// Stable prefix (instructions, every definition, output format), then the
/// segments, then at most `cap` candidate entities.
pub fn compile_one_pass_prompt(
    schema: &MemorySchema,
    segments: &[Segment],
    candidates: &[EntityInstance],
    templates: &PromptTemplates,
    cap: usize,
) -> String {
    let mut p = String::new();
    p.push_str(templates.extraction.trim_end());
    p.push_str("\n\n## Memory definitions\n");
    render_event_defs(schema, None, &mut p);
    render_entity_defs(schema, None, &mut p);
    p.push('\n');
    p.push_str(&output_format(!schema.events.is_empty(), !schema.entities.is_empty()));
    p.push('\n');
    render_segments(segments, &mut p);
    p.push('\n');
    render_candidates(candidates, cap, None, &mut p);
    p
}

/// Baseline used to measure the one-pass saving: one prompt per memory
/// type, each carrying the full segment text.
pub mod multipass {
    use super::*;

    pub fn compile_type_prompt(
        schema: &MemorySchema,
        type_name: &str,
        segments: &[Segment],
        candidates: &[EntityInstance],
        templates: &PromptTemplates,
        cap: usize,
    ) -> String {
        let is_event = schema.event(type_name).is_some();
        let mut p = String::new();
        p.push_str(templates.extraction.trim_end());
        p.push_str("\n\n## Memory definitions\n");
        render_event_defs(schema, Some(type_name), &mut p);
        render_entity_defs(schema, Some(type_name), &mut p);
        p.push('\n');
        p.push_str(&output_format(is_event, !is_event));
        p.push('\n');
        render_segments(segments, &mut p);
        if !is_event {
            p.push('\n');
            render_candidates(candidates, cap, Some(type_name), &mut p);
        }
        p
    }

    /// All per-type prompts for `schema`, in schema order.
    pub fn compile_all(
        schema: &MemorySchema,
        segments: &[Segment],
        candidates: &[EntityInstance],
        templates: &PromptTemplates,
        cap: usize,
    ) -> Vec<String> {
        schema
            .events
            .iter()
            .map(|e| e.event_type.as_str())
            .chain(schema.entities.iter().map(|e| e.entity_type.as_str()))
            .map(|t| compile_type_prompt(schema, t, segments, candidates, templates, cap))
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct RawEvent {
    event_type: String,
    #[serde(default)]
    properties: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    topic: Option<String>,
}

#[derive(Debug, Deserialize)]
struct RawUpdate {
    entity_type: String,
    group_key: String,
    field: String,
    patch: String,
}

/// Parses the reply envelope. Bad individual items become warnings; only a
/// reply that is not an envelope at all fails.
pub fn parse_extraction_reply(reply: &str, schema: &MemorySchema, ts: i64) -> Result<ExtractionResult> {
    let failed = |message: String| Error::ExtractionFailed {
        message,
        raw_reply: reply.to_string(),
    };
    let body = strip_trailing_commas(strip_code_fence(reply));
    let value: serde_json::Value =
        serde_json::from_str(&body).map_err(|e| failed(format!("reply is not JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| failed("reply is not a JSON object".into()))?;
    let list = |key: &str| -> Result<Vec<serde_json::Value>> {
        match obj.get(key) {
            None | Some(serde_json::Value::Null) => Ok(Vec::new()),
            Some(serde_json::Value::Array(a)) => Ok(a.clone()),
            Some(_) => Err(failed(format!("\"{key}\" is not an array"))),
        }
    };
    let mut out = ExtractionResult {
        raw_reply: reply.to_string(),
        ..Default::default()
    };

    for (i, item) in list("events")?.into_iter().enumerate() {
        let raw: RawEvent = match serde_json::from_value(item) {
            Ok(r) => r,
            Err(e) => {
                out.warnings.push(format!("events[{i}]: malformed item: {e}"));
                continue;
            }
        };
        let Some(def) = schema.event(&raw.event_type) else {
            out.warnings.push(format!("events[{i}]: unknown event type {}", raw.event_type));
            continue;
        };
        match conform_event(&raw.properties, def, ts) {
            Ok(c) => {
                for k in &c.dropped {
                    out.warnings.push(format!("events[{i}]: dropped extra key {k}"));
                }
                let mut ev = c.event;
                ev.topic = raw.topic;
                out.events.push(ev);
            }
            Err(e) => out.warnings.push(format!("events[{i}]: {e}")),
        }
    }

    for (i, item) in list("entity_updates")?.into_iter().enumerate() {
        let raw: RawUpdate = match serde_json::from_value(item) {
            Ok(r) => r,
            Err(e) => {
                out.warnings.push(format!("entity_updates[{i}]: malformed item: {e}"));
                continue;
            }
        };
        let field_ok = schema
            .entity(&raw.entity_type)
            .and_then(|d| d.property(&raw.field))
            .is_some_and(|p| p.property.prop_type == PropType::String);
        if !field_ok {
            out.warnings.push(format!(
                "entity_updates[{i}]: {}.{} is not a text field of a known entity type",
                raw.entity_type, raw.field
            ));
            continue;
        }
        match parse_patch(&raw.patch) {
            Ok(patch) => out.entity_patches.push(EntityPatch {
                entity_type: raw.entity_type,
                group_key: normalize_group_key(&raw.group_key),
                field: raw.field,
                patch,
            }),
            Err(e) => out.warnings.push(format!("entity_updates[{i}]: {e}")),
        }
    }
    for w in &out.warnings {
        tracing::warn!("{w}");
    }
    Ok(out)
}

/// Entities whose stored text is nearest to `query`.
pub fn candidate_entities(
    state: &StoreState,
    query: &str,
    embedder: &dyn Embedder,
    k: usize,
) -> Vec<EntityInstance> {
    let filter = SearchFilter {
        kinds: Some(vec![RecordKind::Entity]),
        ..Default::default()
    };
    state
        .dense_search(&embedder.embed_dense(query), k, &filter)
        .into_iter()
        .filter(|h| h.score > 0.0)
        .filter_map(|h| state.entities.get(&h.id).cloned())
        .collect()
}

/// Segmentation, candidate lookup, then exactly one extraction completion.
pub fn extract_one_pass(
    session: &Session,
    schema: &MemorySchema,
    state: &StoreState,
    embedder: &dyn Embedder,
    llm: &dyn LlmProvider,
    templates: &PromptTemplates,
    cfg: &ExtractionConfig,
) -> Result<ExtractionResult> {
    let planned = plan_segments(session, llm, templates)?;
    let segments = apply_segment_plan(session, &planned.plan)?;
    let mut result = ExtractionResult {
        segmentation_usage: planned.usage,
        ..Default::default()
    };
    if segments.is_empty() {
        return Ok(result);
    }
    let all_text = segments.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join("\n");
    let candidates = candidate_entities(state, &all_text, embedder, cfg.candidate_cap.max(1) * 4);
    let prompt = compile_one_pass_prompt(schema, &segments, &candidates, templates, cfg.candidate_cap);
    let completion = llm.complete(&prompt, &CompletionParams::for_purpose("extraction"))?;
    let ts = session.last_timestamp().unwrap_or(1).max(1);
    let parsed = parse_extraction_reply(&completion.text, schema, ts)?;
    result.events = parsed.events;
    result.entity_patches = parsed.entity_patches;
    result.raw_reply = parsed.raw_reply;
    result.warnings = parsed.warnings;
    result.extraction_usage = completion.usage;
    result.extraction_calls = 1;
    result.segments = segments;
    for ev in &mut result.events {
        ev.source_session = session.id.clone();
        ev.user = Some(session.user.clone());
    }
    Ok(result)
}

/// Text compared by dedup: property values only.
pub fn property_text(ev: &EventInstance) -> String {
    ev.properties
        .values()
        .map(|v| v.render())
        .collect::<Vec<_>>()
        .join(" ")
}

fn similarity(a: &EventInstance, b: &EventInstance, embedder: &dyn Embedder) -> f32 {
    dot(
        &embedder.embed_dense(&property_text(a)),
        &embedder.embed_dense(&property_text(b)),
    )
}

fn resolve_with_llm(
    keep: &EventInstance,
    other: &EventInstance,
    schema: &MemorySchema,
    llm: &dyn LlmProvider,
    templates: &PromptTemplates,
) -> Option<EventInstance> {
    let prompt = render(
        &templates.dedup,
        &[("first", &keep.render_text()), ("second", &other.render_text())],
    );
    let reply = llm
        .complete(&prompt, &CompletionParams::for_purpose("dedup"))
        .ok()?;
    let body = strip_trailing_commas(strip_code_fence(&reply.text));
    let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&body).ok()?;
    let def = schema.event(&keep.event_type)?;
    let c = conform_event(&map, def, keep.timestamp).ok()?;
    Some(EventInstance {
        properties: c.event.properties,
        ..keep.clone()
    })
}

/// Merges same-type events whose property texts are more similar than
/// `threshold`, repeating until no such pair remains. The survivor stays
/// at the earlier position; without an LLM its content is the longer text.
pub fn deduplicate_events(
    events: Vec<EventInstance>,
    embedder: &dyn Embedder,
    threshold: f32,
    llm: Option<(&dyn LlmProvider, &MemorySchema, &PromptTemplates)>,
) -> Vec<EventInstance> {
    let mut out = events;
    'outer: loop {
        for i in 0..out.len() {
            for j in i + 1..out.len() {
                if out[i].event_type != out[j].event_type
                    || similarity(&out[i], &out[j], embedder) <= threshold
                {
                    continue;
                }
                let other = out.remove(j);
                let keep = &out[i];
                let merged = llm
                    .and_then(|(l, s, t)| resolve_with_llm(keep, &other, s, l, t))
                    .unwrap_or_else(|| {
                        if property_text(&other).chars().count() > property_text(keep).chars().count() {
                            EventInstance {
                                properties: other.properties.clone(),
                                ..keep.clone()
                            }
                        } else {
                            keep.clone()
                        }
                    });
                out[i] = merged;
                continue 'outer;
            }
        }
        return out;
    }
}
