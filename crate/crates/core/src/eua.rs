//! Patch-based entity updates without an extra LLM call.
//!
//! The extractor emits one `SEARCH`/`REPLACE` block per entity field. The
//! search text is located in the old field value by minimum edit distance,
//! so small inaccuracies in the model's quotation still land on the right
//! span, and the replacement is spliced in.
//!
//! All offsets in this module are **char** offsets, not byte offsets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{EntityInstance, MemorySchema, PropType, Value};

pub const SEARCH_MARKER: &str = "<<<< SEARCH";
pub const DIVIDER_MARKER: &str = "====";
pub const REPLACE_MARKER: &str = ">>>> REPLACE";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub search: String,
    pub replace: String,
}

impl Patch {
    pub fn new(search: impl Into<String>, replace: impl Into<String>) -> Self {
        Patch {
            search: search.into(),
            replace: replace.into(),
        }
    }

    /// Renders the block in the exact delimiter grammar (LF line endings).
    pub fn to_block(&self) -> String {
        let mut out = String::from(SEARCH_MARKER);
        out.push('\n');
        if !self.search.is_empty() {
            out.push_str(&self.search);
            out.push('\n');
        }
        out.push_str(DIVIDER_MARKER);
        out.push('\n');
        if !self.replace.is_empty() {
            out.push_str(&self.replace);
            out.push('\n');
        }
        out.push_str(REPLACE_MARKER);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanMatch {
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub distance: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PatchError {
    #[error("patch parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("needle is empty")]
    EmptyNeedle,
}

fn parse_err(offset: usize, message: impl Into<String>) -> PatchError {
    PatchError::Parse {
        offset,
        message: message.into(),
    }
}

/// Parses a single `<<<< SEARCH / ==== / >>>> REPLACE` block.
///
/// Each delimiter must sit on its own line and appear exactly once. Blank
/// lines around the block are tolerated; anything else outside it is not.
pub fn parse_patch(block: &str) -> Result<Patch, PatchError> {
    let text = block.replace("\r\n", "\n");

    let mut offset = 0usize;
    let mut lines = Vec::new();
    for line in text.split('\n') {
        lines.push((offset, line));
        offset += line.len() + 1;
    }

    let mut search_at = None;
    let mut divider_at = None;
    let mut replace_at = None;
    for (i, (off, line)) in lines.iter().enumerate() {
        let slot = match *line {
            SEARCH_MARKER => &mut search_at,
            DIVIDER_MARKER => &mut divider_at,
            REPLACE_MARKER => &mut replace_at,
            _ => continue,
        };
        if slot.is_some() {
            return Err(parse_err(*off, format!("duplicated delimiter {line:?}")));
        }
        *slot = Some(i);
    }

    let s = search_at.ok_or_else(|| parse_err(0, format!("missing {SEARCH_MARKER:?}")))?;
    let d = divider_at.ok_or_else(|| parse_err(lines[s].0, format!("missing {DIVIDER_MARKER:?}")))?;
    let r = replace_at.ok_or_else(|| parse_err(lines[d].0, format!("missing {REPLACE_MARKER:?}")))?;
    if !(s < d && d < r) {
        return Err(parse_err(lines[d].0, "delimiters out of order"));
    }
    for (off, line) in lines[..s].iter().chain(&lines[r + 1..]) {
        if !line.trim().is_empty() {
            return Err(parse_err(*off, "text outside the patch block"));
        }
    }

    let join = |range: &[(usize, &str)]| range.iter().map(|(_, l)| *l).collect::<Vec<_>>().join("\n");
    Ok(Patch {
        search: join(&lines[s + 1..d]),
        replace: join(&lines[d + 1..r]),
    })
}

/// Finds the substring of `haystack` with minimum Levenshtein distance to
/// `needle`, breaking ties by smaller start, then shorter length.
///
/// Runs the approximate-matching recurrence (free start anywhere in the
/// haystack) row by row. Every cell carries `(distance, start)` and is
/// minimised lexicographically, which yields the leftmost optimal start
/// for each end position without a separate traceback matrix.
pub fn best_approx_span(haystack: &str, needle: &str) -> Result<SpanMatch, PatchError> {
    if needle.is_empty() {
        return Err(PatchError::EmptyNeedle);
    }
    if let Some(byte_start) = haystack.find(needle) {
        let start = haystack[..byte_start].chars().count();
        return Ok(SpanMatch {
            start,
            end: start + needle.chars().count(),
            distance: 0,
        });
    }

    let hay: Vec<char> = haystack.chars().collect();
    let pat: Vec<char> = needle.chars().collect();
    let n = hay.len();

    // Row 0: the empty needle prefix matches the empty substring at every column.
    let mut prev: Vec<(usize, usize)> = (0..=n).map(|j| (0, j)).collect();
    let mut cur = vec![(0usize, 0usize); n + 1];
    for (i, &pc) in pat.iter().enumerate() {
        cur[0] = (i + 1, 0);
        for j in 1..=n {
            let sub = (prev[j - 1].0 + usize::from(hay[j - 1] != pc), prev[j - 1].1);
            let skip_needle = (prev[j].0 + 1, prev[j].1);
            let skip_hay = (cur[j - 1].0 + 1, cur[j - 1].1);
            cur[j] = sub.min(skip_needle).min(skip_hay);
        }
        std::mem::swap(&mut prev, &mut cur);
    }

    let best = prev.iter().map(|c| c.0).min().expect("n + 1 > 0 cells");
    // Among optimal ends, the smallest start wins; then the smallest end.
    let (end, (_, start)) = prev
        .iter()
        .enumerate()
        .filter(|(_, c)| c.0 == best)
        .min_by_key(|(j, c)| (c.1, *j))
        .expect("at least one optimal end");
    Ok(SpanMatch {
        start: *start,
        end,
        distance: best,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EuaConfig {
    /// A patch is rejected when `distance > ceil(max_distance_ratio * |needle|)`.
    pub max_distance_ratio: f64,
}

impl Default for EuaConfig {
    fn default() -> Self {
        EuaConfig {
            max_distance_ratio: 0.5,
        }
    }
}

impl EuaConfig {
    pub fn distance_limit(&self, needle_chars: usize) -> usize {
        (self.max_distance_ratio * needle_chars as f64).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum PatchStatus {
    /// Empty search on an empty field: the field is initialised with the replacement.
    Initialized,
    /// Empty search on a populated field: nothing to do.
    Skipped,
    Applied { span: SpanMatch },
    /// Best span was too far from the search text.
    Rejected { span: SpanMatch, limit: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchOutcome {
    pub text: String,
    pub status: PatchStatus,
}

fn splice(old: &str, start: usize, end: usize, replacement: &str) -> String {
    let byte_at = |char_idx: usize| {
        old.char_indices()
            .nth(char_idx)
            .map_or(old.len(), |(b, _)| b)
    };
    let (bs, be) = (byte_at(start), byte_at(end));
    let mut out = String::with_capacity(old.len() - (be - bs) + replacement.len());
    out.push_str(&old[..bs]);
    out.push_str(replacement);
    out.push_str(&old[be..]);
    out
}

/// Applies a patch under the given rejection guard. Never fails.
pub fn apply_patch_with(old: &str, patch: &Patch, cfg: &EuaConfig) -> PatchOutcome {
    if patch.search.is_empty() {
        return if old.is_empty() {
            PatchOutcome {
                text: patch.replace.clone(),
                status: PatchStatus::Initialized,
            }
        } else {
            PatchOutcome {
                text: old.to_string(),
                status: PatchStatus::Skipped,
            }
        };
    }
    let span = best_approx_span(old, &patch.search).expect("search is non-empty");
    let limit = cfg.distance_limit(patch.search.chars().count());
    if span.distance > limit {
        return PatchOutcome {
            text: old.to_string(),
            status: PatchStatus::Rejected { span, limit },
        };
    }
    PatchOutcome {
        text: splice(old, span.start, span.end, &patch.replace),
        status: PatchStatus::Applied { span },
    }
}

/// Applies a patch with the default guard and returns the new text.
pub fn apply_patch(old: &str, patch: &Patch) -> String {
    apply_patch_with(old, patch, &EuaConfig::default()).text
}

/// Per-field outcome of [`apply_patches`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldOutcome {
    pub field: String,
    pub status: PatchStatus,
}

/// Applies field-wise patches to an entity.
///
/// All fields are checked before anything changes: an unknown or
/// non-string field rejects the whole call and the entity is untouched.
/// Fields are visited in schema order; several patches for one field are
/// applied in the order given. The version is bumped once per call.
pub fn apply_patches(
    entity: &mut EntityInstance,
    patches: &[(String, Patch)],
    schema: &MemorySchema,
    cfg: &EuaConfig,
    now: i64,
) -> crate::Result<Vec<FieldOutcome>> {
    let def = schema
        .entity(&entity.entity_type)
        .ok_or_else(|| crate::Error::UnknownEntity {
            entity_type: entity.entity_type.clone(),
            group_key: entity.group_key.clone(),
        })?;
    for (field, _) in patches {
        match def.property(field) {
            Some(p) if p.property.prop_type == PropType::String => {}
            _ => {
                return Err(crate::Error::UnknownField {
                    entity_type: entity.entity_type.clone(),
                    field: field.clone(),
                })
            }
        }
    }

    let mut by_field: BTreeMap<&str, Vec<&Patch>> = BTreeMap::new();
    for (field, patch) in patches {
        by_field.entry(field.as_str()).or_default().push(patch);
    }

    let mut outcomes = Vec::new();
    for p in &def.properties {
        let name = p.property.name.as_str();
        let Some(field_patches) = by_field.get(name) else {
            continue;
        };
        let mut text = entity
            .properties
            .get(name)
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        for patch in field_patches {
            let outcome = apply_patch_with(&text, patch, cfg);
            text = outcome.text;
            outcomes.push(FieldOutcome {
                field: name.to_string(),
                status: outcome.status,
            });
        }
        entity.properties.insert(name.to_string(), Value::String(text));
    }
    entity.version += 1;
    entity.updated_at = now;
    Ok(outcomes)
}

#[cfg(test)]
pub(crate) mod oracle {
    /// Unit-cost Levenshtein distance between `a` and every prefix of `b`.
    pub fn prefix_distances(a: &[char], b: &[char]) -> Vec<usize> {
        // dist[j] = lev(a, b[..j])
        let m = a.len();
        let mut col: Vec<usize> = (0..=m).collect();
        let mut out = Vec::with_capacity(b.len() + 1);
        out.push(m);
        for &bc in b {
            let mut diag = col[0];
            col[0] += 1;
            for i in 1..=m {
                let up = col[i];
                col[i] = (diag + usize::from(a[i - 1] != bc))
                    .min(col[i - 1] + 1)
                    .min(up + 1);
                diag = up;
            }
            out.push(col[m]);
        }
        out
    }

    /// Exhaustive search over every substring `haystack[i..j]`, `0 <= i <= j <= n`.
    pub fn brute_force_span(haystack: &str, needle: &str) -> (usize, usize, usize) {
        let hay: Vec<char> = haystack.chars().collect();
        let pat: Vec<char> = needle.chars().collect();
        let mut best = (usize::MAX, 0, 0);
        for i in 0..=hay.len() {
            let d = prefix_distances(&pat, &hay[i..]);
            for (len, &dist) in d.iter().enumerate() {
                let key = (dist, i, len);
                if key < best {
                    best = key;
                }
            }
        }
        let (dist, start, len) = best;
        (start, start + len, dist)
    }
}
