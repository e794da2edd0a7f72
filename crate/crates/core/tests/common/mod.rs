//! Shared reference implementations for the integration tests.
//!
//! Everything here is deliberately independent of the engine's code paths:
//! double-precision two-pass softmax, full-sort top-k, and an elimination
//! rank check, all written directly against flat arrays.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sparse_decode::kv_store::{PagedKvCache, SeqId};
use sparse_decode::{AttentionConfig, QueryBlock};

/// Double-precision two-pass softmax attention over the selected rows only.
/// `keys`/`values` are the full `n x d` arrays; `indices` picks rows;
/// `weights` (if given) multiply inside the softmax.
pub fn masked_softmax_f64(
    keys: &[f64],
    values: &[f64],
    query: &[f64],
    d: usize,
    scale: f64,
    indices: &[u32],
    weights: Option<&[f64]>,
) -> Vec<f64> {
    let scores: Vec<f64> = indices
        .iter()
        .map(|&t| {
            let row = &keys[t as usize * d..(t as usize + 1) * d];
            scale * row.iter().zip(query).map(|(k, q)| k * q).sum::<f64>()
        })
        .collect();
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let w = weights.map_or(1.0, |w| w[i]);
            w * (s - m).exp()
        })
        .collect();
    let denom: f64 = p.iter().sum();
    let mut out = vec![0.0f64; d];
    for (i, &t) in indices.iter().enumerate() {
        let row = &values[t as usize * d..(t as usize + 1) * d];
        let a = p[i] / denom;
        for dim in 0..d {
            out[dim] += a * row[dim];
        }
    }
    out
}

/// Reference top-k: score every row with a plain single-precision dot, full
/// sort by (score descending, index ascending), take k, return ascending.
pub fn full_sort_topk(keys: &[f32], query: &[f32], d: usize, scale: f32, k: usize) -> Vec<u32> {
    let n = keys.len() / d;
    let mut scored: Vec<(f32, u32)> = (0..n)
        .map(|t| {
            let row = &keys[t * d..(t + 1) * d];
            let mut dot = 0.0f32;
            for i in 0..d {
                dot += query[i] * row[i];
            }
            (scale * dot, t as u32)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut top: Vec<u32> = scored[..k].iter().map(|&(_, t)| t).collect();
    top.sort_unstable();
    top
}

/// Rank of a row-major `n x m` matrix by Gaussian elimination with partial
/// pivoting; entries below `tol * max_abs` count as zero.
pub fn elimination_rank(matrix: &[f64], n: usize, m: usize, tol: f64) -> usize {
    let mut a = matrix.to_vec();
    let max_abs = a.iter().fold(0.0f64, |acc, &x| acc.max(x.abs()));
    if max_abs == 0.0 {
        return 0;
    }
    let eps = tol * max_abs;
    let mut rank = 0;
    let mut row = 0;
    for col in 0..m {
        let pivot = (row..n).max_by(|&i, &j| {
            a[i * m + col].abs().total_cmp(&a[j * m + col].abs())
        });
        let Some(pivot) = pivot else { break };
        if a[pivot * m + col].abs() <= eps {
            continue;
        }
        for c in 0..m {
            a.swap(row * m + c, pivot * m + c);
        }
        for r in (row + 1)..n {
            let factor = a[r * m + col] / a[row * m + col];
            for c in col..m {
                a[r * m + c] -= factor * a[row * m + c];
            }
        }
        rank += 1;
        row += 1;
        if row == n {
            break;
        }
    }
    rank
}

/// Max-abs relative difference between an engine output row and an `f64`
/// reference row.
pub fn rel_error(got: &[f32], want: &[f64]) -> f64 {
    let scale = want
        .iter()
        .fold(0.0f64, |acc, &x| acc.max(x.abs()))
        .max(1e-30);
    got.iter()
        .zip(want)
        .map(|(&g, &w)| (g as f64 - w).abs())
        .fold(0.0f64, f64::max)
        / scale
}

pub struct Instance {
    pub cache: PagedKvCache<f32>,
    pub seq: SeqId,
    pub config: AttentionConfig,
    pub queries: QueryBlock<f32>,
    pub keys: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
}

/// One random single-sequence decode instance at unit variance. `keys[kvh]`
/// and `values[kvh]` are the per-kv-head `n x d` arrays the cache was filled
/// from, for feeding reference implementations.
pub fn random_instance(n: usize, d: usize, kv_heads: usize, group: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q_heads = kv_heads * group;
    let mut cache = PagedKvCache::<f32>::new(kv_heads, d, 16).unwrap();
    let seq = SeqId(0);

    let mut flat_k = Vec::with_capacity(n * kv_heads * d);
    let mut flat_v = Vec::with_capacity(n * kv_heads * d);
    let mut keys = vec![Vec::with_capacity(n * d); kv_heads];
    let mut values = vec![Vec::with_capacity(n * d); kv_heads];
    for _ in 0..n {
        for kvh in 0..kv_heads {
            for _ in 0..d {
                let k: f32 = StandardNormal.sample(&mut rng);
                let v: f32 = StandardNormal.sample(&mut rng);
                flat_k.push(k);
                flat_v.push(v);
                keys[kvh].push(k);
                values[kvh].push(v);
            }
        }
    }
    cache.append_tokens(seq, &flat_k, &flat_v, n).unwrap();

    let q: Vec<f32> = (0..q_heads * d).map(|_| rng.sample(StandardNormal)).collect();
    let queries = QueryBlock::new(q, 1, q_heads, d).unwrap();
    let config = AttentionConfig::new(q_heads, kv_heads, d).unwrap();

    Instance {
        cache,
        seq,
        config,
        queries,
        keys,
        values,
    }
}

pub fn to_f64(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&x| x as f64).collect()
}

/// k distinct indices in `[0, n)`, sampled uniformly, ascending.
pub fn random_subset(n: usize, k: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| i as u32).collect()
}
