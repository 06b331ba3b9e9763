//! Multi-path recall with time and business weighting, quota merging, and
//! late-interaction reranking.

pub mod multivector;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::embed::{Embedder, MAX_TOKEN_VECTORS};
use crate::operators::DAY_MS;
use crate::store::{MemoryRecord, RecordKind, SearchFilter, StoreState};
use crate::{Error, Result};

use multivector::{maxsim, maxsim_quantized_with};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankConfig {
    pub enabled: bool,
    pub candidate_cap: usize,
    pub quantized: bool,
    pub token_merge_threshold: f32,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            enabled: true,
            candidate_cap: 100,
            quantized: true,
            token_merge_threshold: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecallConfig {
    pub w_time: f64,
    pub w_busi: f64,
    pub freshness_window_ms: i64,
    pub decay_half_life_ms: i64,
    pub type_weights: BTreeMap<String, f64>,
    pub quota_primary: usize,
    pub quota_keyword: usize,
    pub final_k: usize,
    /// Dense share of the hybrid score.
    pub alpha: f64,
    /// Minimum node similarity for the keyword path.
    pub keyword_floor: f64,
    pub rerank: RerankConfig,
}

impl Default for RecallConfig {
    fn default() -> Self {
        RecallConfig {
            w_time: 0.2,
            w_busi: 0.1,
            freshness_window_ms: DAY_MS,
            decay_half_life_ms: 7 * DAY_MS,
            type_weights: BTreeMap::new(),
            quota_primary: 8,
            quota_keyword: 2,
            final_k: 10,
            alpha: 0.7,
            keyword_floor: 0.1,
            rerank: RerankConfig::default(),
        }
    }
}

impl RecallConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.w_time) || !unit(self.w_busi) {
            return Err(Error::Config("w_time and w_busi must lie in [0, 1]".into()));
        }
        if self.w_time + self.w_busi > 1.0 {
            return Err(Error::Config("w_time + w_busi must not exceed 1".into()));
        }
        if !unit(self.alpha) {
            return Err(Error::Config("alpha must lie in [0, 1]".into()));
        }
        if self.freshness_window_ms < 0 || self.decay_half_life_ms <= 0 {
            return Err(Error::Config("freshness window must be >= 0 and half-life > 0".into()));
        }
        if let Some((t, w)) = self.type_weights.iter().find(|(_, w)| !unit(**w)) {
            return Err(Error::Config(format!("type weight for {t} is {w}, outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallPath {
    Primary,
    Keyword,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredMemory {
    pub id: String,
    pub kind: RecordKind,
    pub text: String,
    pub timestamp: i64,
    pub s_origin: f64,
    pub s_time: f64,
    pub s_busi: f64,
    pub s_final: f64,
    pub path: RecallPath,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rerank_score: Option<f64>,
}

/// 1 inside the freshness window, then halving every `decay_half_life`.
pub fn time_score(age_ms: i64, cfg: &RecallConfig) -> f64 {
    let age = age_ms.max(0);
    if age <= cfg.freshness_window_ms {
        return 1.0;
    }
    let excess = (age - cfg.freshness_window_ms) as f64;
    (-excess / cfg.decay_half_life_ms as f64).exp2()
}

/// Instance weight (clamped) if present, else the type weight, else 0.5.
pub fn business_score(record: &MemoryRecord, cfg: &RecallConfig) -> f64 {
    match record.meta.instance_weight {
        Some(w) if !w.is_nan() => w.clamp(0.0, 1.0),
        _ => cfg
            .type_weights
            .get(&record.meta.type_name)
            .copied()
            .unwrap_or(0.5)
            .clamp(0.0, 1.0),
    }
}

/// `(1 - w_time - w_busi)·s_origin + w_time·s_time + w_busi·s_busi`.
///
/// Evaluated as `(1 - (wt + wb))·so + (wt·st + wb·sb)`: the same value, but
/// with zero weights it returns `s_origin` bit for bit and short decimal
/// weights round less (0.3/0.2 on 0.8/1.0/0.5 gives exactly 0.8).
pub fn fuse(s_origin: f64, s_time: f64, s_busi: f64, cfg: &RecallConfig) -> f64 {
    (1.0 - (cfg.w_time + cfg.w_busi)) * s_origin + (cfg.w_time * s_time + cfg.w_busi * s_busi)
}

fn scored(record: &MemoryRecord, s_origin: f64, path: RecallPath, now: i64, cfg: &RecallConfig) -> ScoredMemory {
    let s_time = time_score(now - record.meta.timestamp, cfg);
    let s_busi = business_score(record, cfg);
    ScoredMemory {
        id: record.id.clone(),
        kind: record.kind,
        text: record.text.clone(),
        timestamp: record.meta.timestamp,
        s_origin,
        s_time,
        s_busi,
        s_final: fuse(s_origin, s_time, s_busi, cfg).clamp(0.0, 1.0),
        path,
        rerank_score: None,
    }
}

fn by_final(a: &ScoredMemory, b: &ScoredMemory) -> std::cmp::Ordering {
    b.s_final
        .total_cmp(&a.s_final)
        .then_with(|| b.timestamp.cmp(&a.timestamp))
        .then_with(|| a.id.cmp(&b.id))
}

/// Ranks the primary (hybrid) path by fused score and keeps its quota.
pub fn primary_path(
    query: &str,
    cfg: &RecallConfig,
    state: &StoreState,
    embedder: &dyn Embedder,
    filter: &SearchFilter,
    now: i64,
) -> Vec<ScoredMemory> {
    let hits = state.hybrid_search(query, cfg.quota_primary.saturating_mul(4), filter, embedder, cfg.alpha);
    let mut out: Vec<ScoredMemory> = hits
        .iter()
        .map(|h| scored(&state.records[&h.id], h.s_origin, RecallPath::Primary, now, cfg))
        .collect();
    out.sort_by(by_final);
    out.truncate(cfg.quota_primary);
    out
}

/// Keyword-graph path; node scores are min-max normalized within the path.
pub fn keyword_path(
    query: &str,
    cfg: &RecallConfig,
    state: &StoreState,
    embedder: &dyn Embedder,
    filter: &SearchFilter,
    now: i64,
) -> Vec<ScoredMemory> {
    let hits: Vec<_> = state
        .keyword_search(query, cfg.quota_keyword.saturating_mul(4), embedder, cfg.keyword_floor)
        .into_iter()
        .filter(|h| filter.matches(&state.records[&h.id]))
        .collect();
    let lo = hits.iter().map(|h| h.score).fold(f64::INFINITY, f64::min);
    let hi = hits.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<ScoredMemory> = hits
        .iter()
        .map(|h| {
            let s = if hi > lo { (h.score - lo) / (hi - lo) } else { 1.0 };
            scored(&state.records[&h.id], s, RecallPath::Keyword, now, cfg)
        })
        .collect();
    out.sort_by(by_final);
    out.truncate(cfg.quota_keyword);
    out
}

/// Both paths under their quotas, merged; a record found twice keeps its
/// higher fused score.
pub fn recall(
    query: &str,
    cfg: &RecallConfig,
    state: &StoreState,
    embedder: &dyn Embedder,
    filter: &SearchFilter,
    now: i64,
) -> Result<Vec<ScoredMemory>> {
    cfg.validate()?;
    let mut merged: HashMap<String, ScoredMemory> = HashMap::new();
    let paths = primary_path(query, cfg, state, embedder, filter, now)
        .into_iter()
        .chain(keyword_path(query, cfg, state, embedder, filter, now));
    for m in paths {
        match merged.get(&m.id) {
            Some(prev) if prev.s_final >= m.s_final => {}
            _ => {
                merged.insert(m.id.clone(), m);
            }
        }
    }
    let mut out: Vec<ScoredMemory> = merged.into_values().collect();
    out.sort_by(by_final);
    Ok(out)
}

/// Rescores candidates by MaxSim against their stored token vectors.
/// Candidates without token vectors follow, in their incoming order.
pub fn rerank(
    query: &str,
    candidates: Vec<ScoredMemory>,
    state: &StoreState,
    embedder: &dyn Embedder,
    cfg: &RecallConfig,
) -> Vec<ScoredMemory> {
    let mut candidates = candidates;
    if !cfg.rerank.enabled {
        candidates.truncate(cfg.final_k);
        return candidates;
    }
    candidates.truncate(cfg.rerank.candidate_cap);
    let mut q = embedder.embed_tokens(query);
    q.truncate(MAX_TOKEN_VECTORS);
    if q.is_empty() {
        candidates.truncate(cfg.final_k);
        return candidates;
    }
    let mut scratch = Vec::new();
    let (mut scored, mut rest): (Vec<ScoredMemory>, Vec<ScoredMemory>) = (Vec::new(), Vec::new());
    for mut c in candidates {
        let score = state.compressed.get(&c.id).and_then(|t| {
            if cfg.rerank.quantized {
                maxsim_quantized_with(&q, &t.quantized, &mut scratch).ok()
            } else {
                maxsim(&q, &t.merged).ok()
            }
        });
        match score {
            Some(s) => {
                c.rerank_score = Some(f64::from(s));
                scored.push(c);
            }
            None => rest.push(c),
        }
    }
    // Stable sort keeps the incoming order on exact ties of both keys.
    scored.sort_by(|a, b| {
        b.rerank_score
            .unwrap_or(0.0)
            .total_cmp(&a.rerank_score.unwrap_or(0.0))
            .then_with(|| b.s_final.total_cmp(&a.s_final))
    });
    scored.extend(rest);
    scored.truncate(cfg.final_k);
    scored
}

#[cfg(test)]
mod tests;
