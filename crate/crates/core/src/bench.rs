//! Rerank latency benchmark used by `membase bench rerank`.

use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::embed::{normalize, DEFAULT_DIM};
use crate::retrieval::multivector::{maxsim, maxsim_quantized_with, QuantizedTokens};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankBench {
    pub candidates: usize,
    pub tokens: usize,
    pub query_tokens: usize,
    pub dim: usize,
    pub iterations: usize,
    pub quantized: bool,
    pub seed: u64,
}

impl Default for RerankBench {
    fn default() -> Self {
        RerankBench {
            candidates: 1000,
            tokens: 32,
            query_tokens: 32,
            dim: DEFAULT_DIM,
            iterations: 50,
            quantized: true,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: RerankBench,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    pub mean_ms: f64,
    pub simd: bool,
}

fn unit(rng: &mut StdRng, dim: usize) -> Vec<f32> {
    let mut v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    normalize(&mut v);
    v
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Times scoring plus ordering of `candidates` documents per iteration.
pub fn bench_rerank(cfg: &RerankBench) -> BenchReport {
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let docs: Vec<Vec<Vec<f32>>> = (0..cfg.candidates)
        .map(|_| (0..cfg.tokens).map(|_| unit(&mut rng, cfg.dim)).collect())
        .collect();
    let quantized: Vec<QuantizedTokens> = docs.iter().map(|d| QuantizedTokens::encode(d)).collect();
    let mut samples = Vec::with_capacity(cfg.iterations);
    let mut scratch = Vec::new();
    let mut scores: Vec<(f32, usize)> = Vec::with_capacity(cfg.candidates);
    // One untimed pass warms caches and the allocator.
    for it in 0..=cfg.iterations {
        let query: Vec<Vec<f32>> = (0..cfg.query_tokens).map(|_| unit(&mut rng, cfg.dim)).collect();
        let start = Instant::now();
        scores.clear();
        for i in 0..cfg.candidates {
            let s = if cfg.quantized {
                maxsim_quantized_with(&query, &quantized[i], &mut scratch)
            } else {
                maxsim(&query, &docs[i])
            };
            scores.push((s.unwrap_or(0.0), i));
        }
        scores.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let ms = start.elapsed().as_secs_f64() * 1e3;
        if it > 0 {
            samples.push(ms);
        }
        std::hint::black_box(&scores);
    }
    samples.sort_by(f64::total_cmp);
    let mean_ms = samples.iter().sum::<f64>() / samples.len().max(1) as f64;
    BenchReport {
        config: *cfg,
        p50_ms: percentile(&samples, 50.0),
        p95_ms: percentile(&samples, 95.0),
        max_ms: samples.last().copied().unwrap_or(0.0),
        mean_ms,
        simd: crate::retrieval::multivector::simd_enabled(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_nearest_rank() {
        let s: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&s, 50.0), 10.0);
        assert_eq!(percentile(&s, 95.0), 19.0);
        assert_eq!(percentile(&s, 100.0), 20.0);
        assert_eq!(percentile(&[], 95.0), 0.0);
    }

    #[test]
    fn small_bench_runs() {
        let r = bench_rerank(&RerankBench {
            candidates: 10,
            tokens: 4,
            query_tokens: 3,
            dim: 16,
            iterations: 5,
            ..Default::default()
        });
        assert!(r.p50_ms <= r.p95_ms && r.p95_ms <= r.max_ms);
    }
}
