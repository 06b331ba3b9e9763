//! Embedding provider contract and the deterministic hashing embedder.

use std::collections::BTreeMap;

pub const DEFAULT_DIM: usize = 256;
pub const MAX_TOKEN_VECTORS: usize = 64;

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    /// Unit-norm document vector.
    fn embed_dense(&self, text: &str) -> Vec<f32>;
    /// Unit-norm per-token vectors, in text order.
    fn embed_tokens(&self, text: &str) -> Vec<Vec<f32>>;
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Term-frequency sparse vector over the normalized token stream.
pub fn sparse_terms(text: &str) -> BTreeMap<String, f32> {
    let mut out = BTreeMap::new();
    for t in tokenize(text) {
        *out.entry(t).or_insert(0.0) += 1.0;
    }
    out
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn normalize(v: &mut [f32]) -> bool {
    let norm = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x = (f64::from(*x) / norm) as f32;
    }
    true
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Eight independent lanes so the loop vectorizes.
    let mut acc = [0f32; 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let (ra, rb) = (chunks_a.remainder(), chunks_b.remainder());
    for (x, y) in chunks_a.zip(chunks_b) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Hashed bag-of-words embedder. A pure function of the text.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: DEFAULT_DIM }
    }
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        HashEmbedder { dim }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.dim as u64) as usize
    }

    fn empty_vector(&self) -> Vec<f32> {
        let mut v = vec![0.0; self.dim];
        v[self.bucket("\u{0}empty")] = 1.0;
        v
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_dense(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0.0f32; self.dim];
        for t in tokenize(text) {
            v[self.bucket(&t)] += 1.0;
        }
        if normalize(&mut v) {
            v
        } else {
            self.empty_vector()
        }
    }

    /// Each token vector is its own bucket plus a light share of its neighbours.
    fn embed_tokens(&self, text: &str) -> Vec<Vec<f32>> {
        let toks = tokenize(text);
        (0..toks.len())
            .map(|i| {
                let mut v = vec![0.0f32; self.dim];
                v[self.bucket(&toks[i])] += 1.0;
                if i > 0 {
                    v[self.bucket(&toks[i - 1])] += 0.25;
                }
                if i + 1 < toks.len() {
                    v[self.bucket(&toks[i + 1])] += 0.25;
                }
                normalize(&mut v);
                v
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_is_unit_and_order_free() {
        let e = HashEmbedder::default();
        let a = e.embed_dense("the quick brown fox");
        let b = e.embed_dense("fox brown quick the");
        assert_eq!(a, b);
        let n: f32 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-6);
        let z = e.embed_dense("   ");
        assert!((z.iter().map(|x| x * x).sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tokens_are_unit() {
        let e = HashEmbedder::default();
        for v in e.embed_tokens("Call me Ace, please!") {
            assert!((dot(&v, &v) - 1.0).abs() < 1e-5);
        }
        assert_eq!(tokenize("Call me Ace, please!"), vec!["call", "me", "ace", "please"]);
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f32> = (0..37).map(|i| i as f32 * 0.1).collect();
        let b: Vec<f32> = (0..37).map(|i| 1.0 - i as f32 * 0.01).collect();
        let naive: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-3);
    }
}
