//! Dense and sparse decode attention for a single decode step.
//!
//! One query vector per (batch element, query head) attends over cached
//! tokens. Query heads share kv heads in contiguous groups of `G = H_q /
//! H_kv`. Scores and outputs accumulate at single precision regardless of the
//! cache's storage width, and the softmax subtracts the running maximum
//! before exponentiating.
//!
//! The dense and sparse paths run the same gather, softmax, and accumulation
//! code; they differ only in which rows they touch. Dense gathers each kv
//! head's rows once and reuses them for the whole query group, so its byte
//! traffic is `2*B*N*H_kv*D*w`. Sparse gathers per query head, `2*B*H_q*k*D*w`,
//! the worst-case accounting for irregular per-head index sets.

use rayon::prelude::*;
use thiserror::Error;

use crate::kv_store::{KvError, PagedKvCache, SeqId};
use crate::scalar::{widen, Scalar};

#[derive(Debug, Error)]
pub enum AttnError {
    #[error("invalid attention config: {0}")]
    InvalidConfig(String),

    #[error("batch mismatch: {queries} query rows vs {seqs} sequences")]
    BatchMismatch { queries: usize, seqs: usize },

    #[error("query block shape {got:?} does not match config {want:?}")]
    QueryShape {
        got: (usize, usize),
        want: (usize, usize),
    },

    #[error("non-finite query entry at batch {batch}, head {head}")]
    NonFiniteQuery { batch: usize, head: usize },

    #[error("sequence {0:?} is empty")]
    EmptySequence(SeqId),

    #[error("empty index list for batch {batch}, head {head}")]
    EmptyIndexList { batch: usize, head: usize },

    #[error("non-finite score for batch {batch}, head {head}")]
    NonFiniteScore { batch: usize, head: usize },

    #[error("index list is not strictly increasing at position {0}")]
    NotCanonical(usize),

    #[error("weight {value} at position {position} is not strictly positive and finite")]
    BadWeight { position: usize, value: f32 },

    #[error("{indices} indices but {weights} weights")]
    WeightLengthMismatch { indices: usize, weights: usize },

    #[error(transparent)]
    Cache(#[from] KvError),
}

/// Head counts, head dimension, and softmax scale for one decode step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub scale: f32,
}

impl AttentionConfig {
    /// Default scale is `1/sqrt(head_dim)`.
    pub fn new(num_q_heads: usize, num_kv_heads: usize, head_dim: usize) -> Result<Self, AttnError> {
        if num_q_heads == 0 || num_kv_heads == 0 || head_dim == 0 {
            return Err(AttnError::InvalidConfig(format!(
                "head counts and head_dim must be >= 1, got Hq={num_q_heads}, Hkv={num_kv_heads}, D={head_dim}"
            )));
        }
        if num_q_heads % num_kv_heads != 0 {
            return Err(AttnError::InvalidConfig(format!(
                "num_q_heads ({num_q_heads}) must be a multiple of num_kv_heads ({num_kv_heads})"
            )));
        }
        Ok(Self {
            num_q_heads,
            num_kv_heads,
            head_dim,
            scale: 1.0 / (head_dim as f32).sqrt(),
        })
    }

    pub fn with_scale(mut self, scale: f32) -> Self {
        self.scale = scale;
        self
    }

    pub fn group_size(&self) -> usize {
        self.num_q_heads / self.num_kv_heads
    }

    pub fn kv_head_for(&self, q_head: usize) -> usize {
        gqa_kv_head(q_head, self.group_size())
    }
}

/// Map a query head to its kv head: contiguous blocks of `group_size` query
/// heads share one kv head.
pub fn gqa_kv_head(q_head: usize, group_size: usize) -> usize {
    q_head / group_size
}

/// One decode-step query per (batch element, query head).
#[derive(Debug, Clone)]
pub struct QueryBlock<T> {
    data: Vec<T>,
    batch: usize,
    num_heads: usize,
    head_dim: usize,
}

impl<T: Scalar> QueryBlock<T> {
    pub fn new(
        data: Vec<T>,
        batch: usize,
        num_heads: usize,
        head_dim: usize,
    ) -> Result<Self, AttnError> {
        if data.len() != batch * num_heads * head_dim {
            return Err(AttnError::InvalidConfig(format!(
                "query data length {} does not match {batch}x{num_heads}x{head_dim}",
                data.len()
            )));
        }
        let block = Self {
            data,
            batch,
            num_heads,
            head_dim,
        };
        for b in 0..batch {
            for h in 0..num_heads {
                if block.query(b, h).iter().any(|x| !x.is_finite()) {
                    return Err(AttnError::NonFiniteQuery { batch: b, head: h });
                }
            }
        }
        Ok(block)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn query(&self, b: usize, h: usize) -> &[T] {
        let start = (b * self.num_heads + h) * self.head_dim;
        &self.data[start..start + self.head_dim]
    }
}

/// Canonical per-head index list: strictly increasing token indices with
/// optional strictly positive weights (missing weights mean all ones).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadIndices {
    indices: Vec<u32>,
    weights: Option<Vec<f32>>,
}

impl HeadIndices {
    pub fn new(indices: Vec<u32>, weights: Option<Vec<f32>>) -> Result<Self, AttnError> {
        for i in 1..indices.len() {
            if indices[i] <= indices[i - 1] {
                return Err(AttnError::NotCanonical(i));
            }
        }
        if let Some(w) = &weights {
            if w.len() != indices.len() {
                return Err(AttnError::WeightLengthMismatch {
                    indices: indices.len(),
                    weights: w.len(),
                });
            }
            for (i, &x) in w.iter().enumerate() {
                if !(x.is_finite() && x > 0.0) {
                    return Err(AttnError::BadWeight {
                        position: i,
                        value: x,
                    });
                }
            }
        }
        Ok(Self { indices, weights })
    }

    pub fn unweighted(indices: Vec<u32>) -> Result<Self, AttnError> {
        Self::new(indices, None)
    }

    /// Canonicalize an arbitrary (index, weight) collection: sorts by index
    /// and rejects duplicates.
    pub fn from_unsorted(mut pairs: Vec<(u32, f32)>) -> Result<Self, AttnError> {
        pairs.sort_by_key(|&(i, _)| i);
        let indices: Vec<u32> = pairs.iter().map(|&(i, _)| i).collect();
        let weights: Vec<f32> = pairs.iter().map(|&(_, w)| w).collect();
        Self::new(indices, Some(weights))
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn weights(&self) -> Option<&[f32]> {
        self.weights.as_deref()
    }
}

/// Per-(batch element, query head) index lists: the contract between index
/// selectors and the sparse decode path.
#[derive(Debug, Clone)]
pub struct SparseIndexSet {
    batch: usize,
    num_heads: usize,
    heads: Vec<HeadIndices>,
}

impl SparseIndexSet {
    pub fn from_fn<E>(
        batch: usize,
        num_heads: usize,
        mut f: impl FnMut(usize, usize) -> Result<HeadIndices, E>,
    ) -> Result<Self, E> {
        let mut heads = Vec::with_capacity(batch * num_heads);
        for b in 0..batch {
            for h in 0..num_heads {
                heads.push(f(b, h)?);
            }
        }
        Ok(Self {
            batch,
            num_heads,
            heads,
        })
    }

    /// Every token for every head: the dense limit of the sparse path.
    pub fn full(batch: usize, num_heads: usize, context: usize) -> Self {
        let all: Vec<u32> = (0..context as u32).collect();
        let head = HeadIndices::new(all, None).expect("increasing by construction");
        Self {
            batch,
            num_heads,
            heads: vec![head; batch * num_heads],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn get(&self, b: usize, h: usize) -> &HeadIndices {
        &self.heads[b * self.num_heads + h]
    }

    /// Total selected rows across all heads (gathered row count).
    pub fn total_rows(&self) -> u64 {
        self.heads.iter().map(|h| h.len() as u64).sum()
    }
}

/// Outputs and log-sum-exp normalizers for one decode step.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    batch: usize,
    num_heads: usize,
    head_dim: usize,
    outputs: Vec<f32>,
    log_normalizer: Vec<f32>,
}

impl AttentionOutput {
    fn new(batch: usize, num_heads: usize, head_dim: usize) -> Self {
        Self {
            batch,
            num_heads,
            head_dim,
            outputs: vec![0.0; batch * num_heads * head_dim],
            log_normalizer: vec![0.0; batch * num_heads],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn output(&self, b: usize, h: usize) -> &[f32] {
        let start = (b * self.num_heads + h) * self.head_dim;
        &self.outputs[start..start + self.head_dim]
    }

    pub fn log_normalizer(&self, b: usize, h: usize) -> f32 {
        self.log_normalizer[b * self.num_heads + h]
    }

    fn set(&mut self, b: usize, h: usize, out: &[f32], log_norm: f32) {
        let start = (b * self.num_heads + h) * self.head_dim;
        self.outputs[start..start + self.head_dim].copy_from_slice(out);
        self.log_normalizer[b * self.num_heads + h] = log_norm;
    }
}

/// Weighted softmax-attention over already-gathered rows. Shared by the dense
/// and sparse paths so measured speedups isolate bytes touched.
fn attend_gathered(
    query: &[f32],
    keys: &[f32],
    values: &[f32],
    head_dim: usize,
    scale: f32,
    weights: Option<&[f32]>,
) -> Result<(Vec<f32>, f32), ()> {
    let rows = keys.len() / head_dim;
    debug_assert!(rows > 0);

    let mut scores = vec![0.0f32; rows];
    let mut max_score = f32::NEG_INFINITY;
    let mut all_finite = true;
    for (i, score) in scores.iter_mut().enumerate() {
        let row = &keys[i * head_dim..(i + 1) * head_dim];
        let mut dot = 0.0f32;
        for d in 0..head_dim {
            dot += query[d] * row[d];
        }
        let s = scale * dot;
        all_finite &= s.is_finite();
        if s > max_score {
            max_score = s;
        }
        *score = s;
    }
    if !all_finite {
        return Err(());
    }

    // p_i = w_i * exp(s_i - m); weights enter both numerator and denominator.
    let mut denom = 0.0f32;
    for (i, score) in scores.iter_mut().enumerate() {
        let mut p = (*score - max_score).exp();
        if let Some(w) = weights {
            p *= w[i];
        }
        denom += p;
        *score = p;
    }

    let mut out = vec![0.0f32; head_dim];
    for (i, &p) in scores.iter().enumerate() {
        let row = &values[i * head_dim..(i + 1) * head_dim];
        let a = p / denom;
        for d in 0..head_dim {
            out[d] += a * row[d];
        }
    }
    Ok((out, max_score + denom.ln()))
}

fn check_shapes<T: Scalar>(
    config: &AttentionConfig,
    cache: &PagedKvCache<T>,
    seqs: &[SeqId],
    queries: &QueryBlock<T>,
) -> Result<(), AttnError> {
    if queries.batch() != seqs.len() {
        return Err(AttnError::BatchMismatch {
            queries: queries.batch(),
            seqs: seqs.len(),
        });
    }
    if queries.num_heads() != config.num_q_heads || queries.head_dim() != config.head_dim {
        return Err(AttnError::QueryShape {
            got: (queries.num_heads(), queries.head_dim()),
            want: (config.num_q_heads, config.head_dim),
        });
    }
    if cache.config().num_kv_heads != config.num_kv_heads
        || cache.config().head_dim != config.head_dim
    {
        return Err(AttnError::InvalidConfig(format!(
            "cache geometry ({} kv heads, D={}) does not match attention config ({}, D={})",
            cache.config().num_kv_heads,
            cache.config().head_dim,
            config.num_kv_heads,
            config.head_dim
        )));
    }
    Ok(())
}

/// Dense decode: every query head attends over all cached tokens of its
/// sequence. Rows are gathered once per kv head and shared across the query
/// group.
pub fn dense_decode<T: Scalar>(
    config: &AttentionConfig,
    cache: &PagedKvCache<T>,
    seqs: &[SeqId],
    queries: &QueryBlock<T>,
) -> Result<AttentionOutput, AttnError> {
    check_shapes(config, cache, seqs, queries)?;
    let group = config.group_size();
    let d = config.head_dim;

    let mut lengths = Vec::with_capacity(seqs.len());
    for &seq in seqs {
        let n = cache.total_tokens(seq)?;
        if n == 0 {
            return Err(AttnError::EmptySequence(seq));
        }
        lengths.push(n);
    }
    let full_indices: Vec<Vec<u32>> = lengths
        .iter()
        .map(|&n| (0..n as u32).collect())
        .collect();

    let tasks: Vec<(usize, usize)> = (0..seqs.len())
        .flat_map(|b| (0..config.num_kv_heads).map(move |kvh| (b, kvh)))
        .collect();

    let per_group: Vec<(usize, usize, Vec<(Vec<f32>, f32)>)> = tasks
        .into_par_iter()
        .map(|(b, kvh)| {
            let (k, v) = cache.gather_rows(seqs[b], kvh, &full_indices[b])?;
            let mut k32 = Vec::new();
            let mut v32 = Vec::new();
            widen(&k, &mut k32);
            widen(&v, &mut v32);
            let mut q32 = Vec::new();
            let mut results = Vec::with_capacity(group);
            for g in 0..group {
                let h = kvh * group + g;
                widen(queries.query(b, h), &mut q32);
                let (out, log_norm) =
                    attend_gathered(&q32, &k32, &v32, d, config.scale, None)
                        .map_err(|_| AttnError::NonFiniteScore { batch: b, head: h })?;
                results.push((out, log_norm));
            }
            Ok((b, kvh, results))
        })
        .collect::<Result<_, AttnError>>()?;

    let mut output = AttentionOutput::new(seqs.len(), config.num_q_heads, d);
    for (b, kvh, results) in per_group {
        for (g, (out, log_norm)) in results.into_iter().enumerate() {
            output.set(b, kvh * group + g, &out, log_norm);
        }
    }
    Ok(output)
}

/// Sparse decode: each query head attends only over its selected token
/// indices, with optional multiplicative weights inside the softmax.
pub fn sparse_decode<T: Scalar>(
    config: &AttentionConfig,
    cache: &PagedKvCache<T>,
    seqs: &[SeqId],
    queries: &QueryBlock<T>,
    index_set: &SparseIndexSet,
) -> Result<AttentionOutput, AttnError> {
    check_shapes(config, cache, seqs, queries)?;
    if index_set.batch() != seqs.len() || index_set.num_heads() != config.num_q_heads {
        return Err(AttnError::InvalidConfig(format!(
            "index set shape ({}, {}) does not match batch {} x heads {}",
            index_set.batch(),
            index_set.num_heads(),
            seqs.len(),
            config.num_q_heads
        )));
    }
    for (b, &seq) in seqs.iter().enumerate() {
        if cache.total_tokens(seq)? == 0 {
            return Err(AttnError::EmptySequence(seq));
        }
        for h in 0..config.num_q_heads {
            if index_set.get(b, h).is_empty() {
                return Err(AttnError::EmptyIndexList { batch: b, head: h });
            }
        }
    }

    let d = config.head_dim;
    let tasks: Vec<(usize, usize)> = (0..seqs.len())
        .flat_map(|b| (0..config.num_q_heads).map(move |h| (b, h)))
        .collect();

    let per_head: Vec<(usize, usize, Vec<f32>, f32)> = tasks
        .into_par_iter()
        .map(|(b, h)| {
            let head = index_set.get(b, h);
            let kvh = config.kv_head_for(h);
            let (k, v) = cache.gather_rows(seqs[b], kvh, head.indices())?;
            let mut k32 = Vec::new();
            let mut v32 = Vec::new();
            widen(&k, &mut k32);
            widen(&v, &mut v32);
            let mut q32 = Vec::new();
            widen(queries.query(b, h), &mut q32);
            let (out, log_norm) =
                attend_gathered(&q32, &k32, &v32, d, config.scale, head.weights())
                    .map_err(|_| AttnError::NonFiniteScore { batch: b, head: h })?;
            Ok((b, h, out, log_norm))
        })
        .collect::<Result<_, AttnError>>()?;

    let mut output = AttentionOutput::new(seqs.len(), config.num_q_heads, d);
    for (b, h, out, log_norm) in per_head {
        output.set(b, h, &out, log_norm);
    }
    Ok(output)
}
