//! Index selection: which tokens each query head attends to.
//!
//! Four mechanisms produce [`SparseIndexSet`]s from a query and the cache:
//!
//! - oracle top-k by exact attention scores (a measurement instrument that
//!   isolates sparsity effects from indexer error),
//! - sink + local retention with an oracle-scored heavy middle,
//! - a channel-sketch indexer that approximates scores from a few key
//!   dimensions,
//! - stochastic selection: a deterministic top slice plus uniformly sampled
//!   remainder tokens carrying inverse-inclusion-probability weights, so the
//!   weighted softmax denominator is an unbiased estimate of the full one.
//!
//! Selectors read keys through the cache's uncounted row accessors; their
//! memory cost is modeled analytically in the traffic module rather than
//! charged to the gather counter. All selectors return canonical index lists:
//! strictly increasing and duplicate-free. Everything except the stochastic
//! selector is a pure function of its inputs; the stochastic selector is a
//! pure function of (inputs, seed).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionConfig, AttnError, HeadIndices, QueryBlock, SparseIndexSet};
use crate::kv_store::{KvError, PagedKvCache, SeqId};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("sparsity factor must be >= 1, got {0}")]
    InvalidSparsity(f64),

    #[error("budget k={k} exceeds context length {n}")]
    BudgetExceedsContext { k: usize, n: usize },

    #[error("budget must be >= 1")]
    EmptyBudget,

    #[error("sequence {0:?} is empty")]
    EmptySequence(SeqId),

    #[error("channels {channels} exceed head_dim {head_dim}")]
    TooManyChannels { channels: usize, head_dim: usize },

    #[error("sketch width must be 2 or 4, got {0}")]
    InvalidSketchWidth(usize),

    #[error("deterministic_fraction {fraction} with budget {k} yields no deterministic indices")]
    DegenerateDeterministicPart { fraction: f64, k: usize },

    #[error("invalid selector spec: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Cache(#[from] KvError),

    #[error(transparent)]
    Attn(#[from] AttnError),
}

/// Sparsity budget: either a sparsity factor `S` (each head attends to a
/// `1/S` fraction of tokens) or an absolute token count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Sparsity(f64),
    Tokens(usize),
}

impl Budget {
    /// Resolve to a token count for a context of `n` tokens.
    pub fn resolve(&self, n: usize) -> Result<usize, SelectError> {
        match *self {
            Budget::Sparsity(s) => budget_from_sparsity(s, n),
            Budget::Tokens(k) => {
                if k == 0 {
                    Err(SelectError::EmptyBudget)
                } else {
                    Ok(k)
                }
            }
        }
    }
}

/// Heavy-region budget for the sink+local selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeavyBudget {
    /// Retain `round(fraction * |middle|)` of the middle region.
    Fraction(f64),
    /// Retain a fixed number of middle tokens (clamped to the region).
    Tokens(usize),
}

impl HeavyBudget {
    fn resolve(&self, middle: usize) -> usize {
        match *self {
            HeavyBudget::Fraction(h) => round_half_up(h * middle as f64),
            HeavyBudget::Tokens(k) => k.min(middle),
        }
    }
}

/// Round half away from zero; for the non-negative inputs used here this is
/// round-half-up.
fn round_half_up(x: f64) -> usize {
    x.round() as usize
}

pub const DEFAULT_CHANNELS: usize = 8;
pub const DEFAULT_SKETCH_WIDTH: usize = 2;

fn default_channels() -> usize {
    DEFAULT_CHANNELS
}

fn default_sketch_width() -> usize {
    DEFAULT_SKETCH_WIDTH
}

/// Configuration for one selection mechanism plus its sparsity budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SelectorSpec {
    OracleTopk {
        budget: Budget,
    },
    SinkLocalHeavy {
        #[serde(default)]
        sink: usize,
        #[serde(default)]
        local: usize,
        heavy: HeavyBudget,
    },
    DoubleSparsity {
        budget: Budget,
        #[serde(default = "default_channels")]
        channels: usize,
        #[serde(default = "default_sketch_width")]
        sketch_width: usize,
    },
    Stochastic {
        budget: Budget,
        deterministic_fraction: f64,
        /// Remainder samples per head; `None` fills the budget, i.e.
        /// `k - ceil(deterministic_fraction * k)`.
        sample_count: Option<usize>,
        #[serde(default)]
        rng_seed: u64,
    },
}

impl SelectorSpec {
    /// Rebudget the spec for one sweep point at sparsity factor `s`.
    /// Sink+local selectors map `s` to a heavy fraction of `1/s`.
    pub fn at_sparsity(&self, s: f64) -> SelectorSpec {
        match self.clone() {
            SelectorSpec::OracleTopk { .. } => SelectorSpec::OracleTopk {
                budget: Budget::Sparsity(s),
            },
            SelectorSpec::SinkLocalHeavy { sink, local, .. } => SelectorSpec::SinkLocalHeavy {
                sink,
                local,
                heavy: HeavyBudget::Fraction(1.0 / s),
            },
            SelectorSpec::DoubleSparsity {
                channels,
                sketch_width,
                ..
            } => SelectorSpec::DoubleSparsity {
                budget: Budget::Sparsity(s),
                channels,
                sketch_width,
            },
            SelectorSpec::Stochastic {
                deterministic_fraction,
                sample_count,
                rng_seed,
                ..
            } => SelectorSpec::Stochastic {
                budget: Budget::Sparsity(s),
                deterministic_fraction,
                sample_count,
                rng_seed,
            },
        }
    }

    /// Exact number of indices this spec selects per head on a context of
    /// `n` tokens. Selection sizes are score-independent, so sparse byte
    /// traffic is predictable in closed form.
    pub fn effective_tokens(&self, n: usize) -> Result<usize, SelectError> {
        match self {
            SelectorSpec::OracleTopk { budget } | SelectorSpec::DoubleSparsity { budget, .. } => {
                let k = budget.resolve(n)?;
                if k > n {
                    return Err(SelectError::BudgetExceedsContext { k, n });
                }
                Ok(k)
            }
            SelectorSpec::SinkLocalHeavy { sink, local, heavy } => {
                let s = (*sink).min(n);
                let l = (*local).min(n - s);
                Ok(s + l + heavy.resolve(n - s - l))
            }
            SelectorSpec::Stochastic {
                budget,
                deterministic_fraction,
                sample_count,
                ..
            } => {
                let k = budget.resolve(n)?;
                if k > n {
                    return Err(SelectError::BudgetExceedsContext { k, n });
                }
                let det = deterministic_count(*deterministic_fraction, k)?;
                let samples = sample_count.unwrap_or(k.saturating_sub(det));
                Ok(det + samples.min(n - det))
            }
        }
    }
}

/// Token budget for sparsity factor `s` over `n` tokens:
/// `k = max(1, ceil(n / s))`.
pub fn budget_from_sparsity(s: f64, n: usize) -> Result<usize, SelectError> {
    if !(s >= 1.0) {
        return Err(SelectError::InvalidSparsity(s));
    }
    Ok(((n as f64 / s).ceil() as usize).max(1))
}

fn deterministic_count(fraction: f64, k: usize) -> Result<usize, SelectError> {
    let det = (fraction * k as f64).ceil() as usize;
    if det == 0 || fraction <= 0.0 {
        return Err(SelectError::DegenerateDeterministicPart { fraction, k });
    }
    Ok(det.min(k))
}

/// Exact attention scores `scale * <q, k_t>` for every cached token.
fn oracle_scores<T: Scalar>(
    cache: &PagedKvCache<T>,
    seq: SeqId,
    kv_head: usize,
    query: &[f32],
    scale: f32,
) -> Result<Vec<f32>, SelectError> {
    let n = cache.total_tokens(seq)?;
    let mut scores = vec![0.0f32; n];
    cache.for_each_key_row(seq, kv_head, |t, row| {
        let mut dot = 0.0f32;
        for (d, x) in row.iter().enumerate() {
            dot += query[d] * x.as_f32();
        }
        scores[t] = scale * dot;
    })?;
    Ok(scores)
}

/// Indices of the `k` largest scores, ties broken toward the smaller token
/// index, returned in increasing index order.
fn top_k_indices(scores: &[f32], k: usize) -> Vec<u32> {
    debug_assert!(k >= 1 && k <= scores.len());
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    let rank = |&a: &u32, &b: &u32| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, rank);
        order.truncate(k);
    }
    order.sort_unstable();
    order
}

/// Exact oracle top-k selection over all cached tokens.
pub fn select_oracle_topk<T: Scalar>(
    cache: &PagedKvCache<T>,
    seq: SeqId,
    kv_head: usize,
    query: &[f32],
    scale: f32,
    k: usize,
) -> Result<Vec<u32>, SelectError> {
    let n = cache.total_tokens(seq)?;
    if n == 0 {
        return Err(SelectError::EmptySequence(seq));
    }
    if k == 0 {
        return Err(SelectError::EmptyBudget);
    }
    if k > n {
        return Err(SelectError::BudgetExceedsContext { k, n });
    }
    let scores = oracle_scores(cache, seq, kv_head, query, scale)?;
    Ok(top_k_indices(&scores, k))
}

/// Sink + local retention plus oracle-scored heavy tokens from the middle.
///
/// Sinks are the first tokens, locals the most recent; the heavy budget is
/// spent on the best-scoring tokens strictly between the two regions.
pub fn select_sink_local_heavy<T: Scalar>(
    cache: &PagedKvCache<T>,
    seq: SeqId,
    kv_head: usize,
    query: &[f32],
    scale: f32,
    sink: usize,
    local: usize,
    heavy: HeavyBudget,
) -> Result<Vec<u32>, SelectError> {
    let n = cache.total_tokens(seq)?;
    if n == 0 {
        return Err(SelectError::EmptySequence(seq));
    }
    let sink_end = sink.min(n);
    let local_start = (n - local.min(n)).max(sink_end);
    let middle = local_start - sink_end;
    let heavy_budget = heavy.resolve(middle);

    let mut out: Vec<u32> = (0..sink_end as u32).collect();
    if heavy_budget > 0 {
        let scores = oracle_scores(cache, seq, kv_head, query, scale)?;
        let middle_scores = &scores[sink_end..local_start];
        let top = top_k_indices(middle_scores, heavy_budget);
        out.extend(top.iter().map(|&i| i + sink_end as u32));
    }
    out.extend(local_start as u32..n as u32);
    Ok(out)
}

/// Achieved density of the sink+local+heavy selector in closed form:
/// `(sink + local + round(h * (n - sink - local))) / n` for
/// `sink + local <= n`, and 1 otherwise.
pub fn achieved_density(sink: usize, local: usize, heavy_fraction: f64, n: usize) -> f64 {
    if sink + local >= n {
        return 1.0;
    }
    let middle = n - sink - local;
    (sink + local + round_half_up(heavy_fraction * middle as f64)) as f64 / n as f64
}

/// Per-kv-head channel sketch: the few key dimensions with the largest mean
/// absolute value, stored for every token at reduced precision.
#[derive(Debug, Clone)]
pub struct ChannelSketch {
    context: usize,
    channels: usize,
    sketch_width: usize,
    /// Per kv head: `channels` dimension ids, strictly increasing.
    channel_ids: Vec<Vec<u32>>,
    /// Per kv head: `context x channels` values rounded to the sketch width.
    data: Vec<Vec<f32>>,
}

impl ChannelSketch {
    pub fn context(&self) -> usize {
        self.context
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn sketch_width(&self) -> usize {
        self.sketch_width
    }

    pub fn channel_ids(&self, kv_head: usize) -> &[u32] {
        &self.channel_ids[kv_head]
    }

    /// Bytes one full sketch scan reads for one kv head.
    pub fn scan_bytes_per_head(&self) -> u64 {
        self.context as u64 * self.channels as u64 * self.sketch_width as u64
    }
}

fn round_to_width(x: f32, width: usize) -> f32 {
    match width {
        2 => half::f16::from_f32(x).to_f32(),
        _ => x,
    }
}

/// Build the channel sketch for one sequence: per kv head, pick the
/// `channels` dimensions with the largest mean absolute key value (ties
/// toward the smaller dimension), then store those channels of every key row
/// rounded to `sketch_width` bytes.
pub fn build_channel_sketch<T: Scalar>(
    cache: &PagedKvCache<T>,
    seq: SeqId,
    channels: usize,
    sketch_width: usize,
) -> Result<ChannelSketch, SelectError> {
    let d = cache.config().head_dim;
    let num_kv_heads = cache.config().num_kv_heads;
    if channels > d {
        return Err(SelectError::TooManyChannels {
            channels,
            head_dim: d,
        });
    }
    if sketch_width != 2 && sketch_width != 4 {
        return Err(SelectError::InvalidSketchWidth(sketch_width));
    }
    let n = cache.total_tokens(seq)?;
    if n == 0 {
        return Err(SelectError::EmptySequence(seq));
    }

    let mut channel_ids = Vec::with_capacity(num_kv_heads);
    let mut data = Vec::with_capacity(num_kv_heads);
    for kvh in 0..num_kv_heads {
        let mut abs_sum = vec![0.0f64; d];
        cache.for_each_key_row(seq, kvh, |_, row| {
            for (dim, x) in row.iter().enumerate() {
                abs_sum[dim] += x.as_f32().abs() as f64;
            }
        })?;

        let mut dims: Vec<u32> = (0..d as u32).collect();
        dims.sort_by(|&a, &b| {
            abs_sum[b as usize]
                .total_cmp(&abs_sum[a as usize])
                .then(a.cmp(&b))
        });
        dims.truncate(channels);
        dims.sort_unstable();

        let mut sketch = vec![0.0f32; n * channels];
        cache.for_each_key_row(seq, kvh, |t, row| {
            for (c, &dim) in dims.iter().enumerate() {
                sketch[t * channels + c] =
                    round_to_width(row[dim as usize].as_f32(), sketch_width);
            }
        })?;
        channel_ids.push(dims);
        data.push(sketch);
    }

    Ok(ChannelSketch {
        context: n,
        channels,
        sketch_width,
        channel_ids,
        data,
    })
}

/// Top-k selection by approximate scores from the channel sketch.
pub fn select_double_sparsity(
    sketch: &ChannelSketch,
    kv_head: usize,
    query: &[f32],
    scale: f32,
    k: usize,
) -> Result<Vec<u32>, SelectError> {
    let n = sketch.context;
    if k == 0 {
        return Err(SelectError::EmptyBudget);
    }
    if k > n {
        return Err(SelectError::BudgetExceedsContext { k, n });
    }
    let c = sketch.channels;
    let ids = &sketch.channel_ids[kv_head];
    let rows = &sketch.data[kv_head];
    let mut scores = vec![0.0f32; n];
    for (t, score) in scores.iter_mut().enumerate() {
        let row = &rows[t * c..(t + 1) * c];
        let mut dot = 0.0f32;
        for (i, &dim) in ids.iter().enumerate() {
            dot += query[dim as usize] * row[i];
        }
        *score = scale * dot;
    }
    Ok(top_k_indices(&scores, k))
}

/// Stochastic selection: oracle top `ceil(fraction * k)` with weight 1, plus
/// `samples` tokens drawn uniformly without replacement from the remainder,
/// each weighted `|remainder| / samples` so the weighted softmax denominator
/// is unbiased for the full one. If `samples` exceeds the remainder it is
/// clipped and the weights collapse to 1.
pub fn select_stochastic<T: Scalar>(
    cache: &PagedKvCache<T>,
    seq: SeqId,
    kv_head: usize,
    query: &[f32],
    scale: f32,
    k: usize,
    deterministic_fraction: f64,
    samples: usize,
    head_seed: u64,
) -> Result<HeadIndices, SelectError> {
    let n = cache.total_tokens(seq)?;
    if n == 0 {
        return Err(SelectError::EmptySequence(seq));
    }
    if k == 0 {
        return Err(SelectError::EmptyBudget);
    }
    if k > n {
        return Err(SelectError::BudgetExceedsContext { k, n });
    }
    let det = deterministic_count(deterministic_fraction, k)?.min(n);
    let top = select_oracle_topk(cache, seq, kv_head, query, scale, det)?;

    let remainder_len = n - det;
    let samples = samples.min(remainder_len);
    if samples == 0 {
        return Ok(HeadIndices::unweighted(top)?);
    }

    // Enumerate the complement of the (sorted) top set.
    let mut remainder = Vec::with_capacity(remainder_len);
    let mut top_iter = top.iter().copied().peekable();
    for t in 0..n as u32 {
        if top_iter.peek() == Some(&t) {
            top_iter.next();
        } else {
            remainder.push(t);
        }
    }

    let exhaustive = samples == remainder_len;
    let weight = if exhaustive {
        1.0
    } else {
        remainder_len as f32 / samples as f32
    };

    let mut rng = ChaCha8Rng::seed_from_u64(head_seed);
    let picked = rand::seq::index::sample(&mut rng, remainder_len, samples);

    let mut pairs: Vec<(u32, f32)> = top.iter().map(|&i| (i, 1.0f32)).collect();
    pairs.extend(picked.iter().map(|p| (remainder[p], weight)));
    Ok(HeadIndices::from_unsorted(pairs)?)
}

/// Mix a base seed with the (batch, head) coordinates so each head owns an
/// independent, reproducible stream.
pub fn head_seed(rng_seed: u64, batch: usize, head: usize) -> u64 {
    let mut x = rng_seed
        ^ (batch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (head as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    // splitmix64 finalizer
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per-sequence state some selectors need before head-level selection.
#[derive(Debug, Default)]
pub struct SelectorContext {
    sketch: Option<ChannelSketch>,
}

impl SelectorContext {
    pub fn sketch(&self) -> Option<&ChannelSketch> {
        self.sketch.as_ref()
    }
}

/// Build the per-sequence context (the channel sketch, when the spec needs one).
pub fn build_selector_context<T: Scalar>(
    spec: &SelectorSpec,
    cache: &PagedKvCache<T>,
    seq: SeqId,
) -> Result<SelectorContext, SelectError> {
    match spec {
        SelectorSpec::DoubleSparsity {
            channels,
            sketch_width,
            ..
        } => Ok(SelectorContext {
            sketch: Some(build_channel_sketch(cache, seq, *channels, *sketch_width)?),
        }),
        _ => Ok(SelectorContext::default()),
    }
}

/// Run the spec's mechanism for one (batch, head) pair.
pub fn select_for_head<T: Scalar>(
    spec: &SelectorSpec,
    ctx: &SelectorContext,
    cache: &PagedKvCache<T>,
    seq: SeqId,
    config: &AttentionConfig,
    query: &[f32],
    batch: usize,
    head: usize,
) -> Result<HeadIndices, SelectError> {
    let kv_head = config.kv_head_for(head);
    let n = cache.total_tokens(seq)?;
    match spec {
        SelectorSpec::OracleTopk { budget } => {
            let k = budget.resolve(n)?;
            let idx = select_oracle_topk(cache, seq, kv_head, query, config.scale, k)?;
            Ok(HeadIndices::unweighted(idx)?)
        }
        SelectorSpec::SinkLocalHeavy { sink, local, heavy } => {
            let idx = select_sink_local_heavy(
                cache,
                seq,
                kv_head,
                query,
                config.scale,
                *sink,
                *local,
                *heavy,
            )?;
            Ok(HeadIndices::unweighted(idx)?)
        }
        SelectorSpec::DoubleSparsity { budget, .. } => {
            let k = budget.resolve(n)?;
            let sketch = ctx
                .sketch
                .as_ref()
                .ok_or_else(|| SelectError::InvalidSpec("missing channel sketch".into()))?;
            let idx = select_double_sparsity(sketch, kv_head, query, config.scale, k)?;
            Ok(HeadIndices::unweighted(idx)?)
        }
        SelectorSpec::Stochastic {
            budget,
            deterministic_fraction,
            sample_count,
            rng_seed,
        } => {
            let k = budget.resolve(n)?;
            let det = deterministic_count(*deterministic_fraction, k)?;
            let samples = sample_count.unwrap_or(k.saturating_sub(det));
            select_stochastic(
                cache,
                seq,
                kv_head,
                query,
                config.scale,
                k,
                *deterministic_fraction,
                samples,
                head_seed(*rng_seed, batch, head),
            )
        }
    }
}

/// Run the spec for every (batch, head) pair and assemble the index set.
pub fn select_index_set<T: Scalar>(
    spec: &SelectorSpec,
    cache: &PagedKvCache<T>,
    seqs: &[SeqId],
    config: &AttentionConfig,
    queries: &QueryBlock<T>,
) -> Result<SparseIndexSet, SelectError> {
    let mut contexts = Vec::with_capacity(seqs.len());
    for &seq in seqs {
        contexts.push(build_selector_context(spec, cache, seq)?);
    }
    let mut q32 = Vec::new();
    SparseIndexSet::from_fn(seqs.len(), config.num_q_heads, |b, h| {
        crate::scalar::widen(queries.query(b, h), &mut q32);
        select_for_head(spec, &contexts[b], cache, seqs[b], config, &q32, b, h)
    })
}
