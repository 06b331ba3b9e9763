//! Late-interaction scoring over per-token vectors, plus the two storage
//! compressions applied to those vectors: merging near-identical consecutive
//! tokens, and 8-bit scalar quantization with a per-vector scale.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::normalize;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("maxsim needs non-empty query and document token lists")]
pub struct EmptyTokens;

#[inline(always)]
fn dot_lanes(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 16];
    let ca = a.chunks_exact(16);
    let cb = b.chunks_exact(16);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..16 {
            acc[k] = x[k].mul_add(y[k], acc[k]);
        }
    }
    let mut s = 0f32;
    for v in acc {
        s += v;
    }
    for (x, y) in ra.iter().zip(rb) {
        s = x.mul_add(*y, s);
    }
    s
}

#[inline(always)]
fn maxsim_kernel(query: &[Vec<f32>], doc_flat: &[f32], dim: usize) -> f32 {
    let mut total = 0f32;
    for q in query {
        let mut best = f32::NEG_INFINITY;
        for d in doc_flat.chunks_exact(dim) {
            let s = dot_lanes(q, d);
            if s > best {
                best = s;
            }
        }
        total += best;
    }
    total
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn hsum256(v: std::arch::x86_64::__m256) -> f32 {
    use std::arch::x86_64::*;
    let lo = _mm256_castps256_ps128(v);
    let hi = _mm256_extractf128_ps(v, 1);
    let s = _mm_add_ps(lo, hi);
    let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
    let s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
    _mm_cvtss_f32(s)
}

/// Register-blocked: two query tokens against four document tokens share loads.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn maxsim_kernel_avx2(query: &[Vec<f32>], doc_flat: &[f32], dim: usize) -> f32 {
    use std::arch::x86_64::*;
    if dim == 0 || dim % 8 != 0 || query.iter().any(|q| q.len() != dim) {
        return maxsim_kernel(query, doc_flat, dim);
    }
    let n = doc_flat.len() / dim;
    let d = doc_flat.as_ptr();
    let mut total = 0f32;
    for pair in query.chunks(2) {
        let q0 = pair[0].as_ptr();
        let q1 = pair.get(1).unwrap_or(&pair[0]).as_ptr();
        let mut best = [f32::NEG_INFINITY; 2];
        let mut j = 0;
        while j + 4 <= n {
            let mut acc = [_mm256_setzero_ps(); 8];
            let rows = [d.add(j * dim), d.add((j + 1) * dim), d.add((j + 2) * dim), d.add((j + 3) * dim)];
            let mut k = 0;
            while k < dim {
                let a0 = _mm256_loadu_ps(q0.add(k));
                let a1 = _mm256_loadu_ps(q1.add(k));
                for t in 0..4 {
                    let x = _mm256_loadu_ps(rows[t].add(k));
                    acc[t] = _mm256_fmadd_ps(a0, x, acc[t]);
                    acc[4 + t] = _mm256_fmadd_ps(a1, x, acc[4 + t]);
                }
                k += 8;
            }
            for t in 0..4 {
                best[0] = best[0].max(hsum256(acc[t]));
                best[1] = best[1].max(hsum256(acc[4 + t]));
            }
            j += 4;
        }
        for row in doc_flat[j * dim..].chunks_exact(dim) {
            best[0] = best[0].max(dot_lanes(&pair[0], row));
            best[1] = best[1].max(dot_lanes(pair.get(1).unwrap_or(&pair[0]), row));
        }
        total += best[0];
        if pair.len() == 2 {
            total += best[1];
        }
    }
    total
}

/// Whether the AVX2/FMA kernel is in use on this machine.
pub fn simd_enabled() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

fn maxsim_flat(query: &[Vec<f32>], doc_flat: &[f32], dim: usize) -> f32 {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected above.
            return unsafe { maxsim_kernel_avx2(query, doc_flat, dim) };
        }
    }
    maxsim_kernel(query, doc_flat, dim)
}

/// Sum over query tokens of the best dot product against any document token.
pub fn maxsim(query: &[Vec<f32>], doc: &[Vec<f32>]) -> Result<f32, EmptyTokens> {
    if query.is_empty() || doc.is_empty() {
        return Err(EmptyTokens);
    }
    let dim = doc[0].len();
    let flat: Vec<f32> = doc.iter().flat_map(|d| d.iter().copied()).collect();
    Ok(maxsim_flat(query, &flat, dim))
}

/// Token vectors stored as `i8` codes with one scale per vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTokens {
    pub dim: usize,
    pub scales: Vec<f32>,
    pub codes: Vec<i8>,
}

impl QuantizedTokens {
    pub fn encode(tokens: &[Vec<f32>]) -> Self {
        let dim = tokens.first().map_or(0, Vec::len);
        let mut scales = Vec::with_capacity(tokens.len());
        let mut codes = Vec::with_capacity(tokens.len() * dim);
        for t in tokens {
            let (scale, c) = quantize(t);
            scales.push(scale);
            codes.extend(c);
        }
        QuantizedTokens { dim, scales, codes }
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    pub fn decode(&self) -> Vec<Vec<f32>> {
        self.scales
            .iter()
            .zip(self.codes.chunks_exact(self.dim.max(1)))
            .map(|(s, c)| dequantize(*s, c))
            .collect()
    }

    fn decode_flat(&self, out: &mut Vec<f32>) {
        out.clear();
        out.reserve(self.codes.len());
        for (s, c) in self.scales.iter().zip(self.codes.chunks_exact(self.dim.max(1))) {
            out.extend(c.iter().map(|&q| f32::from(q) * s));
        }
    }

    pub fn max_scale(&self) -> f32 {
        self.scales.iter().copied().fold(0.0, f32::max)
    }

    /// Storage size in bytes (codes plus scales).
    pub fn byte_len(&self) -> usize {
        self.codes.len() + 4 * self.scales.len()
    }
}

/// Scale is `max|component| / 127`; codes are rounded and clamped to ±127.
pub fn quantize(v: &[f32]) -> (f32, Vec<i8>) {
    let max = v.iter().fold(0f32, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return (0.0, vec![0; v.len()]);
    }
    let scale = max / 127.0;
    let codes = v
        .iter()
        .map(|x| (x / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    (scale, codes)
}

pub fn dequantize(scale: f32, codes: &[i8]) -> Vec<f32> {
    codes.iter().map(|&c| f32::from(c) * scale).collect()
}

/// MaxSim against quantized document tokens.
pub fn maxsim_quantized(query: &[Vec<f32>], doc: &QuantizedTokens) -> Result<f32, EmptyTokens> {
    let mut scratch = Vec::new();
    maxsim_quantized_with(query, doc, &mut scratch)
}

/// As [`maxsim_quantized`], reusing a caller-owned decode buffer.
pub fn maxsim_quantized_with(
    query: &[Vec<f32>],
    doc: &QuantizedTokens,
    scratch: &mut Vec<f32>,
) -> Result<f32, EmptyTokens> {
    if query.is_empty() || doc.is_empty() {
        return Err(EmptyTokens);
    }
    doc.decode_flat(scratch);
    Ok(maxsim_flat(query, scratch, doc.dim))
}

/// Upper bound on `|maxsim_quantized - maxsim_exact|`.
///
/// Each decoded component is within `scale/2` of the original, so one dot
/// product moves by at most `‖q‖₁·scale/2`; taking a max over document
/// tokens moves it by at most the largest such term, and the per-query-token
/// errors add. The last term covers f32 accumulation over `dim` products.
pub fn quantization_error_bound(query: &[Vec<f32>], doc: &QuantizedTokens) -> f64 {
    let s_max = f64::from(doc.max_scale());
    let quant: f64 = query
        .iter()
        .map(|q| q.iter().map(|x| f64::from(x.abs())).sum::<f64>() * s_max / 2.0)
        .sum();
    let fp = query.len() as f64 * doc.dim as f64 * f64::from(f32::EPSILON);
    quant + fp
}

/// Averages runs of consecutive tokens whose cosine exceeds `threshold`.
pub fn merge_tokens(tokens: &[Vec<f32>], threshold: f32) -> Vec<Vec<f32>> {
    let mut out: Vec<Vec<f32>> = Vec::new();
    let mut run: Vec<f32> = Vec::new();
    let mut prev: Option<&Vec<f32>> = None;
    for t in tokens {
        let continues = prev.is_some_and(|p| cosine(p, t) > threshold);
        if !continues && !run.is_empty() {
            let mut v = std::mem::take(&mut run);
            normalize(&mut v);
            out.push(v);
        }
        if run.is_empty() {
            run = t.clone();
        } else {
            for (a, b) in run.iter_mut().zip(t) {
                *a += b;
            }
        }
        prev = Some(t);
    }
    if !run.is_empty() {
        normalize(&mut run);
        out.push(run);
    }
    out
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        ab += f64::from(*x) * f64::from(*y);
        aa += f64::from(*x) * f64::from(*x);
        bb += f64::from(*y) * f64::from(*y);
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())) as f32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedTokens {
    pub merged: Vec<Vec<f32>>,
    pub quantized: QuantizedTokens,
}

/// Token merge, truncation to `max_tokens`, then quantization.
pub fn compress_tokens(tokens: &[Vec<f32>], merge_threshold: f32, max_tokens: usize) -> CompressedTokens {
    let mut merged = merge_tokens(tokens, merge_threshold);
    merged.truncate(max_tokens);
    let quantized = QuantizedTokens::encode(&merged);
    CompressedTokens { merged, quantized }
}
