use super::*;
use crate::embed::HashEmbedder;
use crate::store::{RecordMeta, Store, StoreConfig};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn cfg(w_time: f64, w_busi: f64) -> RecallConfig {
    RecallConfig {
        w_time,
        w_busi,
        ..RecallConfig::default()
    }
}

fn record(id: &str, text: &str, ts: i64, type_name: &str, weight: Option<f64>) -> MemoryRecord {
    MemoryRecord::from_text(
        id,
        RecordKind::Event,
        text,
        RecordMeta {
            type_name: type_name.into(),
            timestamp: ts,
            instance_weight: weight,
            ..Default::default()
        },
        &HashEmbedder::default(),
    )
}

#[test]
fn time_score_points() {
    let c = RecallConfig::default();
    assert_eq!(time_score(0, &c), 1.0);
    assert_eq!(time_score(c.freshness_window_ms, &c), 1.0);
    assert_eq!(time_score(c.freshness_window_ms + c.decay_half_life_ms, &c), 0.5);
    assert_eq!(time_score(c.freshness_window_ms + 2 * c.decay_half_life_ms, &c), 0.25);
    // Continuity just past the boundary.
    assert!(1.0 - time_score(c.freshness_window_ms + 1, &c) < 1e-8);
}

#[test]
fn business_precedence() {
    let mut c = RecallConfig::default();
    c.type_weights.insert("Pref".into(), 0.2);
    c.type_weights.insert("Low".into(), 0.3);
    assert_eq!(business_score(&record("a", "x", 1, "Pref", Some(0.9)), &c), 0.9);
    assert_eq!(business_score(&record("b", "x", 1, "Low", None), &c), 0.3);
    assert_eq!(business_score(&record("c", "x", 1, "Other", None), &c), 0.5);
    assert_eq!(business_score(&record("d", "x", 1, "Pref", Some(4.0)), &c), 1.0);
}

#[test]
fn fuse_examples() {
    assert_eq!(fuse(0.8, 1.0, 0.5, &cfg(0.3, 0.2)), 0.80);
    assert_eq!(fuse(0.37, 0.1, 0.9, &cfg(0.0, 0.0)), 0.37);
    assert_eq!(fuse(1.0, 1.0, 1.0, &cfg(0.3, 0.2)), 1.0);
}

#[test]
fn config_validation() {
    assert!(cfg(0.6, 0.5).validate().is_err());
    assert!(cfg(-0.1, 0.0).validate().is_err());
    assert!(cfg(0.5, 0.5).validate().is_ok());
}

fn weights() -> impl Strategy<Value = (f64, f64)> {
    (0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(a, b)| (a, b * (1.0 - a)))
}

proptest! {
    #[test]
    fn fusion_bounds((wt, wb) in weights(), o in 0.0..=1.0f64, t in 0.0..=1.0f64, b in 0.0..=1.0f64) {
        let s = fuse(o, t, b, &cfg(wt, wb));
        prop_assert!((-1e-15..=1.0 + 1e-15).contains(&s));
    }

    #[test]
    fn fusion_monotone((wt, wb) in weights(), o in 0.0..=1.0f64, t in 0.0..=1.0f64, b in 0.0..=1.0f64, d in 0.0..=1.0f64) {
        let c = cfg(wt, wb);
        let base = fuse(o, t, b, &c);
        prop_assert!(fuse((o + d).min(1.0), t, b, &c) >= base);
        prop_assert!(fuse(o, (t + d).min(1.0), b, &c) >= base);
        prop_assert!(fuse(o, t, (b + d).min(1.0), &c) >= base);
    }

    #[test]
    fn zero_weights_keep_origin_ranking(scores in prop::collection::vec((0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64), 1..30)) {
        let c = cfg(0.0, 0.0);
        let mut by_origin: Vec<usize> = (0..scores.len()).collect();
        by_origin.sort_by(|&i, &j| scores[j].0.total_cmp(&scores[i].0).then(i.cmp(&j)));
        let mut by_final: Vec<usize> = (0..scores.len()).collect();
        by_final.sort_by(|&i, &j| {
            let (a, b) = (scores[i], scores[j]);
            fuse(b.0, b.1, b.2, &c).total_cmp(&fuse(a.0, a.1, a.2, &c)).then(i.cmp(&j))
        });
        prop_assert_eq!(by_origin, by_final);
    }

    #[test]
    fn time_decay_shape(a in 0i64..(60 * DAY_MS), b in 0i64..(60 * DAY_MS)) {
        let c = RecallConfig::default();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(time_score(hi, &c) <= time_score(lo, &c));
        prop_assert!(time_score(hi, &c) > 0.0);
    }
}

const WORDS: &[&str] = &[
    "tea", "coffee", "hiking", "paris", "lyon", "chess", "python", "rust", "recursion", "music", "guitar",
    "dog", "cat", "garden", "travel", "train", "plane", "book", "novel", "exam",
];

fn random_text(rng: &mut StdRng) -> String {
    (0..rng.gen_range(2..7))
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn fixture(n: usize, seed: u64) -> Store {
    let mut rng = StdRng::seed_from_u64(seed);
    let s = Store::in_memory(StoreConfig::default());
    let now = 100 * DAY_MS;
    for i in 0..n {
        let ts = now - rng.gen_range(0..30 * DAY_MS);
        let ty = ["Pref", "Fact", "Plan"][i % 3];
        let w = (i % 4 == 0).then(|| rng.gen_range(0.0..1.0));
        let r = record(&format!("r{i:02}"), &random_text(&mut rng), ts, ty, w);
        let kws = crate::store::extract_keywords(&r.text);
        s.upsert_record(r).unwrap();
        s.keyword_update(&format!("r{i:02}"), &kws).unwrap();
    }
    s
}

/// Recomputes the primary path from raw hybrid scores with its own fusion.
fn primary_oracle(state: &StoreState, q: &str, c: &RecallConfig, now: i64) -> Vec<(String, f64)> {
    let e = HashEmbedder::default();
    let hits = state.hybrid_search(q, c.quota_primary * 4, &SearchFilter::default(), &e, c.alpha);
    let mut out: Vec<(String, f64, i64)> = hits
        .into_iter()
        .map(|h| {
            let r = &state.records[&h.id];
            let age = (now - r.meta.timestamp).max(0);
            let st = if age <= c.freshness_window_ms {
                1.0
            } else {
                0.5f64.powf((age - c.freshness_window_ms) as f64 / c.decay_half_life_ms as f64)
            };
            let sb = r
                .meta
                .instance_weight
                .map(|w| w.clamp(0.0, 1.0))
                .unwrap_or_else(|| c.type_weights.get(&r.meta.type_name).copied().unwrap_or(0.5));
            let f = (1.0 - c.w_time - c.w_busi) * h.s_origin + c.w_time * st + c.w_busi * sb;
            (h.id, f, r.meta.timestamp)
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.2.cmp(&a.2)).then(a.0.cmp(&b.0)));
    out.truncate(c.quota_primary);
    out.into_iter().map(|x| (x.0, x.1)).collect()
}

#[test]
fn recall_matches_oracle_and_respects_quotas() {
    let s = fixture(50, 3);
    let e = HashEmbedder::default();
    let now = 100 * DAY_MS;
    let mut c = cfg(0.3, 0.2);
    c.type_weights.insert("Pref".into(), 0.9);
    let mut rng = StdRng::seed_from_u64(8);
    for _ in 0..20 {
        let q = random_text(&mut rng);
        let st = s.state();
        let got = recall(&q, &c, &st, &e, &SearchFilter::default(), now).unwrap();
        assert!(got.len() <= 10);
        let primary = primary_path(&q, &c, &st, &e, &SearchFilter::default(), now);
        let want = primary_oracle(&st, &q, &c, now);
        assert_eq!(primary.len(), want.len());
        for (g, w) in primary.iter().zip(&want) {
            assert_eq!(g.id, w.0);
            assert!((g.s_final - w.1).abs() < 1e-12);
        }
        for m in &got {
            for v in [m.s_origin, m.s_time, m.s_busi, m.s_final] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        let mut ids: Vec<&str> = got.iter().map(|m| m.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), got.len(), "duplicates collapsed");
        // Every primary item survives the merge with at least its own score.
        for p in &primary {
            let m = got.iter().find(|m| m.id == p.id).unwrap();
            assert!(m.s_final >= p.s_final);
        }
    }
}

#[test]
fn duplicate_keeps_max() {
    let s = Store::in_memory(StoreConfig::default());
    s.upsert_record(record("a", "chess openings", 10, "Fact", None)).unwrap();
    s.keyword_update("a", &["chess".into()]).unwrap();
    let e = HashEmbedder::default();
    let c = cfg(0.0, 0.0);
    let st = s.state();
    let both = recall("chess openings", &c, &st, &e, &SearchFilter::default(), 10).unwrap();
    assert_eq!(both.len(), 1);
    let p = primary_path("chess openings", &c, &st, &e, &SearchFilter::default(), 10);
    let k = keyword_path("chess openings", &c, &st, &e, &SearchFilter::default(), 10);
    assert_eq!(both[0].s_final, p[0].s_final.max(k[0].s_final));
}

#[test]
fn zero_weights_no_rerank_keeps_hybrid_order() {
    let s = fixture(50, 4);
    let e = HashEmbedder::default();
    let mut c = cfg(0.0, 0.0);
    c.quota_keyword = 0;
    c.rerank.enabled = false;
    let st = s.state();
    let q = "chess recursion tea";
    let got: Vec<String> = rerank(q, recall(q, &c, &st, &e, &SearchFilter::default(), 0).unwrap(), &st, &e, &c)
        .into_iter()
        .map(|m| m.id)
        .collect();
    let hybrid: Vec<String> = st
        .hybrid_search(q, c.quota_primary, &SearchFilter::default(), &e, c.alpha)
        .into_iter()
        .map(|h| h.id)
        .collect();
    assert_eq!(got, hybrid);
}

#[test]
fn newer_first_when_only_time_counts() {
    let s = Store::in_memory(StoreConfig::default());
    s.upsert_record(record("old", "garden tomatoes", 0, "Fact", None)).unwrap();
    s.upsert_record(record("new", "garden tomatoes", 20 * DAY_MS, "Fact", None)).unwrap();
    let st = s.state();
    let out = recall("garden tomatoes", &cfg(1.0, 0.0), &st, &HashEmbedder::default(), &SearchFilter::default(), 21 * DAY_MS).unwrap();
    assert_eq!(out[0].id, "new");
}

#[test]
fn rerank_puts_identical_text_first_and_bypass_truncates() {
    let s = fixture(30, 5);
    let e = HashEmbedder::default();
    let target = s.read(|st| st.records["r17"].text.clone());
    let st = s.state();
    let mut c = cfg(0.0, 0.0);
    c.final_k = 5;
    let candidates: Vec<ScoredMemory> = st
        .records
        .values()
        .map(|r| scored(r, 0.5, RecallPath::Primary, 0, &c))
        .collect();
    for quantized in [false, true] {
        c.rerank.quantized = quantized;
        let out = rerank(&target, candidates.clone(), &st, &e, &c);
        assert_eq!(out.len(), 5);
        let best = out[0].rerank_score.unwrap();
        let own = out.iter().find(|m| m.id == "r17").map(|m| m.rerank_score.unwrap());
        assert_eq!(own, Some(best), "quantized={quantized}");
    }
    c.rerank.enabled = false;
    let out = rerank(&target, candidates.clone(), &st, &e, &c);
    assert_eq!(out, candidates[..5].to_vec());
}

#[test]
fn records_without_tokens_follow() {
    let s = Store::in_memory(StoreConfig::default());
    s.upsert_record(record("t", "chess", 1, "Fact", None)).unwrap();
    let mut bare = record("bare", "chess", 1, "Fact", None);
    bare.tokens.clear();
    s.upsert_record(bare).unwrap();
    let st = s.state();
    let c = RecallConfig::default();
    let mut high = scored(&st.records["bare"], 1.0, RecallPath::Primary, 1, &c);
    high.s_final = 1.0;
    let low = scored(&st.records["t"], 0.0, RecallPath::Primary, 1, &c);
    let out = rerank("chess", vec![high, low], &st, &HashEmbedder::default(), &c);
    assert_eq!(out.iter().map(|m| m.id.as_str()).collect::<Vec<_>>(), ["t", "bare"]);
}

/// Quantized and exact rerank agree on the top 10 whenever every adjacent
/// exact gap among them is wider than twice the error bound. The leading
/// candidates carry one token per query token at a set cosine, so their
/// exact scores are spread apart; the rest are random.
#[test]
fn quantized_top_ten_matches_exact_when_gaps_allow() {
    use multivector::{quantization_error_bound, QuantizedTokens};
    let mut rng = StdRng::seed_from_u64(99);
    let dim = 64;
    let unit = |rng: &mut StdRng| {
        let mut v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        crate::embed::normalize(&mut v);
        v
    };
    for trial in 0..20 {
        let q: Vec<Vec<f32>> = (0..8).map(|_| unit(&mut rng)).collect();
        let mut docs: Vec<Vec<Vec<f32>>> = (0..100).map(|_| (0..16).map(|_| unit(&mut rng)).collect()).collect();
        for (i, doc) in docs.iter_mut().take(12).enumerate() {
            let c = 0.95 - 0.035 * i as f32;
            for (j, qj) in q.iter().enumerate() {
                let u = unit(&mut rng);
                let proj: f32 = u.iter().zip(qj).map(|(a, b)| a * b).sum();
                let mut perp: Vec<f32> = u.iter().zip(qj).map(|(a, b)| a - proj * b).collect();
                crate::embed::normalize(&mut perp);
                let s = (1.0 - c * c).sqrt();
                let mut v: Vec<f32> = qj.iter().zip(&perp).map(|(a, b)| c * a + s * b).collect();
                crate::embed::normalize(&mut v);
                doc[j] = v;
            }
        }
        let exact: Vec<f64> = docs
            .iter()
            .map(|d| {
                q.iter()
                    .map(|qi| {
                        d.iter()
                            .map(|dj| qi.iter().zip(dj).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum::<f64>())
                            .fold(f64::NEG_INFINITY, f64::max)
                    })
                    .sum()
            })
            .collect();
        let quant: Vec<QuantizedTokens> = docs.iter().map(|d| QuantizedTokens::encode(d)).collect();
        let eps = quant.iter().map(|qd| quantization_error_bound(&q, qd)).fold(0.0, f64::max);
        let mut order: Vec<usize> = (0..100).collect();
        order.sort_by(|&a, &b| exact[b].total_cmp(&exact[a]));
        let separated = order[..11].windows(2).all(|w| exact[w[0]] - exact[w[1]] > 2.0 * eps);
        assert!(separated, "trial {trial}: gap condition not met (eps {eps})");
        let approx: Vec<f32> = quant.iter().map(|qd| multivector::maxsim_quantized(&q, qd).unwrap()).collect();
        let mut qorder: Vec<usize> = (0..100).collect();
        qorder.sort_by(|&a, &b| approx[b].total_cmp(&approx[a]));
        assert_eq!(&order[..10], &qorder[..10]);
    }
}

proptest! {
    #[test]
    fn maxsim_bounds_nonnegative(
        q in prop::collection::vec(prop::collection::vec(0.0f32..1.0, 8), 1..6),
        d in prop::collection::vec(prop::collection::vec(0.0f32..1.0, 8), 1..6),
    ) {
        let norm = |v: &Vec<Vec<f32>>| v.iter().filter_map(|x| {
            let mut x = x.clone();
            crate::embed::normalize(&mut x).then_some(x)
        }).collect::<Vec<_>>();
        let (q, d) = (norm(&q), norm(&d));
        prop_assume!(!q.is_empty() && !d.is_empty());
        let s = maxsim(&q, &d).unwrap();
        prop_assert!(s >= 0.0 && s <= q.len() as f32 + 1e-5);
    }
}
