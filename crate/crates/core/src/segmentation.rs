//! Two-phase memory segmentation: saliency filtering, then partitioning of
//! an interleaved session into topic segments given as message-index spans.
//!
//! A topic may own several non-contiguous spans; they are stitched back
//! together into one [`Segment`] so an interrupted topic becomes a single
//! memory. Messages not covered by any span are non-salient and dropped.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::{render, strip_code_fence, strip_trailing_commas, PromptTemplates};
use crate::provider::{CompletionParams, LlmProvider, ProviderError, TokenUsage};

/// Marker line placed between non-contiguous spans of the same topic.
pub const ELISION: &str = "…";
pub const MAX_RETRIES: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
    System,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::System => "system",
            Role::Tool => "tool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub index: usize,
    pub role: Role,
    pub content: String,
    pub timestamp: i64,
}

impl Message {
    pub fn render(&self) -> String {
        format!("{}: {}", self.role.as_str(), self.content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub user: String,
    pub messages: Vec<Message>,
}

impl Session {
    pub fn new(id: impl Into<String>, user: impl Into<String>) -> Self {
        Session {
            id: id.into(),
            user: user.into(),
            messages: Vec::new(),
        }
    }

    /// Appends with the next index; convenience for fixtures.
    pub fn push(&mut self, role: Role, content: impl Into<String>, timestamp: i64) {
        let index = self.messages.len();
        self.messages.push(Message {
            index,
            role,
            content: content.into(),
            timestamp,
        });
    }

    pub fn check(&self) -> Result<(), String> {
        for (i, m) in self.messages.iter().enumerate() {
            if m.index != i {
                return Err(format!("message {i} has index {}", m.index));
            }
            if m.content.is_empty() && m.role != Role::System {
                return Err(format!("message {i} is empty"));
            }
        }
        Ok(())
    }

    /// Whole-session rendering, one message per line.
    pub fn text(&self) -> String {
        self.messages
            .iter()
            .map(Message::render)
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Numbered transcript used in the segmentation prompt.
    pub fn transcript(&self) -> String {
        self.messages
            .iter()
            .map(|m| format!("[{}] {}", m.index, m.render()))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn last_timestamp(&self) -> Option<i64> {
        self.messages.last().map(|m| m.timestamp)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicSpan {
    pub label: String,
    /// Inclusive `(start, end)` message indices.
    pub spans: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub topics: Vec<TopicSpan>,
}

impl SegmentPlan {
    pub fn is_empty(&self) -> bool {
        self.topics.iter().all(|t| t.spans.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub topic: String,
    pub text: String,
    pub source_spans: Vec<(usize, usize)>,
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanViolation {
    OutOfRange { topic: String, span: (usize, usize), len: usize },
    StartAfterEnd { topic: String, span: (usize, usize) },
    Overlap { index: usize },
    Unsorted { topic: String, span: (usize, usize) },
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanViolation::OutOfRange { topic, span, len } => write!(
                f,
                "topic {topic:?}: span ({}, {}) is out of range for {len} messages",
                span.0, span.1
            ),
            PlanViolation::StartAfterEnd { topic, span } => {
                write!(f, "topic {topic:?}: span ({}, {}) has start > end", span.0, span.1)
            }
            PlanViolation::Overlap { index } => write!(f, "spans overlap at message {index}"),
            PlanViolation::Unsorted { topic, span } => write!(
                f,
                "topic {topic:?}: span ({}, {}) is not in ascending order",
                span.0, span.1
            ),
        }
    }
}

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("session is empty")]
    EmptySession,
    #[error("provider error after {attempts} call(s): {source}")]
    Provider {
        attempts: u32,
        #[source]
        source: ProviderError,
    },
    #[error("segmentation failed: {reason}")]
    Failed {
        reason: String,
        violations: Vec<PlanViolation>,
        raw_reply: String,
    },
    #[error("invalid plan: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidPlan(Vec<PlanViolation>),
}

/// Reports out-of-range, inverted, unsorted and overlapping spans.
pub fn validate_plan(session: &Session, plan: &SegmentPlan) -> Vec<PlanViolation> {
    let len = session.messages.len();
    let mut out = Vec::new();
    let mut well_formed = Vec::new();
    for t in &plan.topics {
        let mut prev: Option<(usize, usize)> = None;
        for &span in &t.spans {
            let (s, e) = span;
            if s > e {
                out.push(PlanViolation::StartAfterEnd {
                    topic: t.label.clone(),
                    span,
                });
                continue;
            }
            if e >= len {
                out.push(PlanViolation::OutOfRange {
                    topic: t.label.clone(),
                    span,
                    len,
                });
                continue;
            }
            if let Some(p) = prev {
                if s < p.0 {
                    out.push(PlanViolation::Unsorted {
                        topic: t.label.clone(),
                        span,
                    });
                }
            }
            prev = Some(span);
            well_formed.push(span);
        }
    }
    well_formed.sort_unstable();
    let mut covered_to: Option<usize> = None;
    for (s, e) in well_formed {
        if let Some(c) = covered_to {
            if s <= c {
                out.push(PlanViolation::Overlap { index: s });
            }
        }
        covered_to = Some(covered_to.map_or(e, |c| c.max(e)));
    }
    out
}

/// Stitches each topic's spans into one segment. Pure and deterministic.
pub fn apply_segment_plan(
    session: &Session,
    plan: &SegmentPlan,
) -> Result<Vec<Segment>, SegmentationError> {
    let violations = validate_plan(session, plan);
    if !violations.is_empty() {
        return Err(SegmentationError::InvalidPlan(violations));
    }
    let mut segments = Vec::new();
    for t in &plan.topics {
        if t.spans.is_empty() {
            continue;
        }
        let mut lines: Vec<String> = Vec::new();
        let mut last_end: Option<usize> = None;
        for &(s, e) in &t.spans {
            if let Some(prev) = last_end {
                if s > prev + 1 {
                    lines.push(ELISION.to_string());
                }
            }
            lines.extend(session.messages[s..=e].iter().map(Message::render));
            last_end = Some(e);
        }
        segments.push(Segment {
            topic: t.label.clone(),
            text: lines.join("\n"),
            source_spans: t.spans.clone(),
            session_id: session.id.clone(),
        });
    }
    Ok(segments)
}

pub const FORMAT_INSTRUCTIONS: &str = r#"Reply with JSON only, in exactly this shape:
{"topics": [{"label": "<short topic name>", "spans": [[start, end], ...]}, ...]}
Reply {"topics": []} if nothing is worth remembering."#;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanReply {
    topics: Vec<TopicReply>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopicReply {
    label: String,
    spans: Vec<(usize, usize)>,
}

/// Parses a plan reply, tolerating code fences and trailing commas only.
pub fn parse_plan_reply(reply: &str) -> Result<SegmentPlan, String> {
    let body = strip_trailing_commas(strip_code_fence(reply));
    let parsed: PlanReply = serde_json::from_str(&body).map_err(|e| e.to_string())?;
    Ok(SegmentPlan {
        topics: parsed
            .topics
            .into_iter()
            .map(|t| TopicSpan {
                label: t.label,
                spans: t.spans,
            })
            .collect(),
    })
}

pub fn segmentation_prompt(session: &Session, templates: &PromptTemplates) -> String {
    render(
        &templates.segmentation,
        &[
            ("session_transcript", &session.transcript()),
            ("format_instructions", FORMAT_INSTRUCTIONS),
        ],
    )
}

/// Plan plus the accumulated token usage of the calls that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedSegments {
    pub plan: SegmentPlan,
    pub usage: TokenUsage,
    pub calls: u32,
}

/// Asks the provider for a segment plan; invalid plans are retried with the
/// violations appended to the prompt, at most [`MAX_RETRIES`] times.
pub fn plan_segments(
    session: &Session,
    llm: &dyn LlmProvider,
    templates: &PromptTemplates,
) -> Result<PlannedSegments, SegmentationError> {
    if session.messages.is_empty() {
        return Err(SegmentationError::EmptySession);
    }
    let base = segmentation_prompt(session, templates);
    let params = CompletionParams::for_purpose("segmentation");
    let mut prompt = base.clone();
    let mut usage = TokenUsage::default();
    let mut calls = 0u32;
    loop {
        calls += 1;
        let completion = llm
            .complete(&prompt, &params)
            .map_err(|source| SegmentationError::Provider {
                attempts: calls,
                source,
            })?;
        usage.prompt_tokens += completion.usage.prompt_tokens;
        usage.completion_tokens += completion.usage.completion_tokens;

        let plan = parse_plan_reply(&completion.text).map_err(|reason| SegmentationError::Failed {
            reason: format!("unparseable reply: {reason}"),
            violations: Vec::new(),
            raw_reply: completion.text.clone(),
        })?;
        let violations = validate_plan(session, &plan);
        if violations.is_empty() {
            return Ok(PlannedSegments { plan, usage, calls });
        }
        if calls > MAX_RETRIES {
            return Err(SegmentationError::Failed {
                reason: violations
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("; "),
                violations,
                raw_reply: completion.text,
            });
        }
        let notes = violations
            .iter()
            .map(|v| format!("- {v}"))
            .collect::<Vec<_>>()
            .join("\n");
        prompt = format!("{base}\n\nYour previous reply was rejected:\n{notes}\nReply again with a corrected plan.");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::MockProvider;

    fn session(n: usize) -> Session {
        let mut s = Session::new("s1", "u1");
        for i in 0..n {
            let role = if i % 2 == 0 { Role::User } else { Role::Assistant };
            s.push(role, format!("a{i}"), 1_000 + i as i64);
        }
        s
    }

    fn plan(topics: &[(&str, &[(usize, usize)])]) -> SegmentPlan {
        SegmentPlan {
            topics: topics
                .iter()
                .map(|(l, s)| TopicSpan {
                    label: l.to_string(),
                    spans: s.to_vec(),
                })
                .collect(),
        }
    }

    #[test]
    fn scripted_interleaved_plan() {
        let s = session(12);
        let llm = MockProvider::from_pairs([(
            "Transcript:",
            r#"{"topics": [{"label": "A", "spans": [[0,3],[8,11]]}, {"label": "B", "spans": [[4,7]]}]}"#,
        )]);
        let out = plan_segments(&s, &llm, &PromptTemplates::default()).unwrap();
        assert_eq!(out.plan.topics.len(), 2);
        assert_eq!(out.plan.topics.iter().map(|t| t.spans.len()).sum::<usize>(), 3);
        assert_eq!(out.calls, 1);
    }

    #[test]
    fn repairs_fences_and_trailing_commas() {
        let s = session(2);
        let llm = MockProvider::from_pairs([(
            "Transcript:",
            "```json\n{\"topics\": [{\"label\": \"x\", \"spans\": [[0,1],],},]}\n```",
        )]);
        let out = plan_segments(&s, &llm, &PromptTemplates::default()).unwrap();
        assert_eq!(out.plan, plan(&[("x", &[(0, 1)])]));
    }

    #[test]
    fn degenerate_session_may_be_all_noise() {
        let s = session(1);
        let llm = MockProvider::from_pairs([("Transcript:", r#"{"topics": []}"#)]);
        let out = plan_segments(&s, &llm, &PromptTemplates::default()).unwrap();
        assert!(out.plan.is_empty());
        let llm = MockProvider::from_pairs([(
            "Transcript:",
            r#"{"topics": [{"label": "greeting-only", "spans": [[0,0]]}]}"#,
        )]);
        assert_eq!(plan_segments(&s, &llm, &PromptTemplates::default()).unwrap().plan.topics.len(), 1);
    }

    #[test]
    fn out_of_range_fails_after_retries() {
        let s = session(10);
        let llm = MockProvider::from_pairs([(
            "Transcript:",
            r#"{"topics": [{"label": "A", "spans": [[5,20]]}]}"#,
        )]);
        match plan_segments(&s, &llm, &PromptTemplates::default()) {
            Err(SegmentationError::Failed { violations, raw_reply, .. }) => {
                assert_eq!(
                    violations,
                    vec![PlanViolation::OutOfRange { topic: "A".into(), span: (5, 20), len: 10 }]
                );
                assert!(raw_reply.contains("[5,20]"));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(llm.calls().len(), 1 + MAX_RETRIES as usize);
    }

    #[test]
    fn retry_prompt_carries_violations() {
        let s = session(6);
        let llm = MockProvider::from_pairs([
            ("previous reply was rejected", r#"{"topics": [{"label": "A", "spans": [[0,2]]}]}"#),
            ("Transcript:", r#"{"topics": [{"label": "A", "spans": [[0,2]]}, {"label": "B", "spans": [[2,4]]}]}"#),
        ]);
        let out = plan_segments(&s, &llm, &PromptTemplates::default()).unwrap();
        assert_eq!(out.calls, 2);
        assert_eq!(out.plan, plan(&[("A", &[(0, 2)])]));
    }

    #[test]
    fn garbage_reply_fails_loudly() {
        let s = session(3);
        let llm = MockProvider::from_pairs([("Transcript:", "Sure! Topic A is messages 0-2.")]);
        assert!(matches!(
            plan_segments(&s, &llm, &PromptTemplates::default()),
            Err(SegmentationError::Failed { .. })
        ));
    }

    #[test]
    fn validate_plan_cases() {
        let s = session(6);
        assert_eq!(
            validate_plan(&s, &plan(&[("A", &[(0, 2), (2, 4)])])),
            vec![PlanViolation::Overlap { index: 2 }]
        );
        assert_eq!(
            validate_plan(&s, &plan(&[("A", &[(3, 1)])])),
            vec![PlanViolation::StartAfterEnd { topic: "A".into(), span: (3, 1) }]
        );
        assert!(validate_plan(&s, &plan(&[("A", &[(0, 1), (4, 5)]), ("B", &[(2, 3)])])).is_empty());
        assert_eq!(
            validate_plan(&s, &plan(&[("A", &[(4, 5), (0, 1)])])),
            vec![PlanViolation::Unsorted { topic: "A".into(), span: (0, 1) }]
        );
        assert_eq!(
            validate_plan(&s, &plan(&[("A", &[(0, 3)]), ("B", &[(1, 2)])])),
            vec![PlanViolation::Overlap { index: 1 }]
        );
    }

    #[test]
    fn non_contiguous_spans_are_joined_with_elision() {
        let s = session(12);
        let segs = apply_segment_plan(&s, &plan(&[("A", &[(0, 1), (6, 7)])])).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(
            segs[0].text,
            "user: a0\nassistant: a1\n…\nuser: a6\nassistant: a7"
        );
    }

    #[test]
    fn identity_cover_reproduces_session_text() {
        let s = session(5);
        let segs = apply_segment_plan(&s, &plan(&[("all", &[(0, 4)])])).unwrap();
        assert_eq!(segs[0].text, s.text());
        let segs = apply_segment_plan(&s, &plan(&[("all", &[(0, 1), (2, 4)])])).unwrap();
        assert_eq!(segs[0].text, s.text(), "adjacent spans need no elision");
    }

    #[test]
    fn invalid_plan_is_rejected_by_apply() {
        let s = session(3);
        assert!(matches!(
            apply_segment_plan(&s, &plan(&[("A", &[(0, 5)])])),
            Err(SegmentationError::InvalidPlan(_))
        ));
    }
}
