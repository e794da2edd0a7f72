//! Attention correctness against independent double-precision references.

mod common;

use common::{masked_softmax_f64, random_instance, rel_error, to_f64};
use proptest::prelude::*;
use sparse_decode::attention::{dense_decode, sparse_decode, HeadIndices, SparseIndexSet};
use sparse_decode::kv_store::{PagedKvCache, SeqId};
use sparse_decode::{AttentionConfig, QueryBlock};

#[test]
fn dense_matches_double_precision_reference() {
    for seed in 0..20 {
        let inst = random_instance(64, 8, 2, 2, seed);
        let out = dense_decode(&inst.config, &inst.cache, &[inst.seq], &inst.queries).unwrap();
        let all: Vec<u32> = (0..64).collect();
        for h in 0..inst.config.num_q_heads {
            let kvh = inst.config.kv_head_for(h);
            let want = masked_softmax_f64(
                &to_f64(&inst.keys[kvh]),
                &to_f64(&inst.values[kvh]),
                &to_f64(inst.queries.query(0, h)),
                8,
                inst.config.scale as f64,
                &all,
                None,
            );
            let err = rel_error(out.output(0, h), &want);
            assert!(err < 1e-5, "seed {seed} head {h}: rel err {err}");
        }
    }
}

#[test]
fn sparse_matches_masked_reference_on_top_half() {
    use sparse_decode::selectors::select_oracle_topk;
    let n = 256;
    for seed in 0..10 {
        let inst = random_instance(n, 16, 1, 2, 100 + seed);
        let mut q32 = Vec::new();
        let idx = SparseIndexSet::from_fn(1, inst.config.num_q_heads, |b, h| {
            sparse_decode::scalar::widen(inst.queries.query(b, h), &mut q32);
            let sel = select_oracle_topk(
                &inst.cache,
                inst.seq,
                inst.config.kv_head_for(h),
                &q32,
                inst.config.scale,
                n / 2,
            )?;
            Ok::<_, Box<dyn std::error::Error>>(HeadIndices::unweighted(sel)?)
        })
        .unwrap();

        let out =
            sparse_decode(&inst.config, &inst.cache, &[inst.seq], &inst.queries, &idx).unwrap();
        for h in 0..inst.config.num_q_heads {
            let kvh = inst.config.kv_head_for(h);
            let want = masked_softmax_f64(
                &to_f64(&inst.keys[kvh]),
                &to_f64(&inst.values[kvh]),
                &to_f64(inst.queries.query(0, h)),
                16,
                inst.config.scale as f64,
                idx.get(0, h).indices(),
                None,
            );
            let err = rel_error(out.output(0, h), &want);
            assert!(err < 1e-5, "seed {seed} head {h}: rel err {err}");
        }
    }
}

fn max_rel_diff(a: &[f32], b: &[f32]) -> f64 {
    let scale = b.iter().fold(0.0f32, |acc, &x| acc.max(x.abs())).max(1e-30) as f64;
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .fold(0.0f64, f64::max)
        / scale
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 40, ..ProptestConfig::default() })]

    /// The sparse path over every token with unit weights is the dense path.
    #[test]
    fn full_index_equivalence(
        n in 1usize..=512,
        d in prop::sample::select(vec![8usize, 64, 128]),
        group in prop::sample::select(vec![1usize, 4]),
        seed in 0u64..1_000_000,
    ) {
        let inst = random_instance(n, d, 1, group, seed);
        let dense = dense_decode(&inst.config, &inst.cache, &[inst.seq], &inst.queries).unwrap();
        let full = SparseIndexSet::full(1, inst.config.num_q_heads, n);
        let sparse =
            sparse_decode(&inst.config, &inst.cache, &[inst.seq], &inst.queries, &full).unwrap();
        for h in 0..inst.config.num_q_heads {
            let err = max_rel_diff(sparse.output(0, h), dense.output(0, h));
            prop_assert!(err < 1e-6, "head {} rel err {}", h, err);
            let lse = (sparse.log_normalizer(0, h) - dense.log_normalizer(0, h)).abs();
            prop_assert!(lse < 1e-4, "head {} lse diff {}", h, lse);
        }
    }

    /// Permuting the (index, weight) pairs before canonicalization cannot
    /// change the output.
    #[test]
    fn permutation_invariance(seed in 0u64..1_000_000) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;

        let n = 64;
        let inst = random_instance(n, 8, 1, 1, seed);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let mut pairs: Vec<(u32, f32)> = (0..n as u32)
            .step_by(3)
            .map(|i| (i, 0.5 + (i % 5) as f32))
            .collect();
        let sorted = SparseIndexSet::from_fn(1, 1, |_, _| {
            HeadIndices::from_unsorted(pairs.clone())
        })
        .unwrap();
        pairs.shuffle(&mut rng);
        let shuffled = SparseIndexSet::from_fn(1, 1, |_, _| {
            HeadIndices::from_unsorted(pairs.clone())
        })
        .unwrap();

        let a = sparse_decode(&inst.config, &inst.cache, &[inst.seq], &inst.queries, &sorted)
            .unwrap();
        let b = sparse_decode(&inst.config, &inst.cache, &[inst.seq], &inst.queries, &shuffled)
            .unwrap();
        prop_assert!(max_rel_diff(a.output(0, 0), b.output(0, 0)) < 1e-6);
    }
}

/// Adding a constant to every score must not move the output:
/// max-subtraction correctness. The shift is built exactly in f32 — keys on
/// a coarse grid, unit query along one axis, shift of 8.0 — so the scores of
/// the shifted cache are bit-exactly `s + 8`.
#[test]
fn shift_invariance_along_query_direction() {
    let d = 8;
    let n = 48;
    for seed in 0..10 {
        let inst = random_instance(n, d, 1, 1, 900 + seed);
        // Snap keys to a 2^-10 grid in [-4, 4]; adding 8.0 is then exact.
        let grid = |x: f32| (x.clamp(-3.9, 3.9) * 1024.0).round() / 1024.0;
        let base_keys: Vec<f32> = inst.keys[0].iter().map(|&x| grid(x)).collect();
        let shifted_keys: Vec<f32> = base_keys
            .iter()
            .enumerate()
            .map(|(i, &x)| if i % d == 0 { x + 8.0 } else { x })
            .collect();

        let mut base_cache = PagedKvCache::<f32>::new(1, d, 16).unwrap();
        base_cache
            .append_tokens(SeqId(0), &base_keys, &inst.values[0], n)
            .unwrap();
        let mut shifted_cache = PagedKvCache::<f32>::new(1, d, 16).unwrap();
        shifted_cache
            .append_tokens(SeqId(0), &shifted_keys, &inst.values[0], n)
            .unwrap();

        let mut q = vec![0.0f32; d];
        q[0] = 1.0;
        let queries = QueryBlock::new(q, 1, 1, d).unwrap();
        let cfg = AttentionConfig::new(1, 1, d).unwrap().with_scale(1.0);

        let base = dense_decode(&cfg, &base_cache, &[SeqId(0)], &queries).unwrap();
        let moved = dense_decode(&cfg, &shifted_cache, &[SeqId(0)], &queries).unwrap();
        let err = max_rel_diff(moved.output(0, 0), base.output(0, 0));
        assert!(err < 1e-6, "seed {seed}: rel err {err}");
        // The normalizer shifts by exactly the score offset.
        let lse_shift = moved.log_normalizer(0, 0) - base.log_normalizer(0, 0);
        assert!((lse_shift - 8.0).abs() < 1e-5, "lse shift {lse_shift}");
    }
}

/// Scaling every weight by one power of two is an exact score shift
/// (`w * e^s = e^(s + ln w)`); outputs must come back bit-identical.
#[test]
fn uniform_weight_scaling_is_an_exact_score_shift() {
    let n = 96;
    let inst = random_instance(n, 8, 1, 2, 1234);
    let ones = SparseIndexSet::from_fn(1, 2, |_, _| {
        HeadIndices::new((0..n as u32).collect(), Some(vec![1.0; n]))
    })
    .unwrap();
    let scaled = SparseIndexSet::from_fn(1, 2, |_, _| {
        HeadIndices::new((0..n as u32).collect(), Some(vec![1024.0; n]))
    })
    .unwrap();
    let a = sparse_decode(&inst.config, &inst.cache, &[inst.seq], &inst.queries, &ones).unwrap();
    let b = sparse_decode(&inst.config, &inst.cache, &[inst.seq], &inst.queries, &scaled).unwrap();
    for h in 0..2 {
        assert_eq!(a.output(0, h), b.output(0, h), "head {h}");
        let lse = b.log_normalizer(0, h) - a.log_normalizer(0, h);
        assert!((lse - 1024.0f32.ln()).abs() < 1e-5, "head {h} lse shift {lse}");
    }
}

/// With one overwhelmingly dominant key, any index set containing that token
/// is within 1e-3 of the dense output (softmax concentration).
#[test]
fn monotone_inclusion_on_planted_instance() {
    let d = 8;
    let n = 128;
    let planted = 41u32;
    for seed in 0..5 {
        let mut inst = random_instance(n, d, 1, 1, 40 + seed);
        let q = inst.queries.query(0, 0).to_vec();
        // Rebuild the cache with key[planted] = c * q, c large.
        let mut flat = inst.keys[0].clone();
        let c = 40.0f32 / inst.config.scale / q.iter().map(|x| x * x).sum::<f32>();
        for dim in 0..d {
            flat[planted as usize * d + dim] = c * q[dim];
        }
        let mut cache = PagedKvCache::<f32>::new(1, d, 16).unwrap();
        cache.append_tokens(SeqId(0), &flat, &inst.values[0], n).unwrap();
        inst.cache = cache;

        let dense = dense_decode(&inst.config, &inst.cache, &[inst.seq], &inst.queries).unwrap();
        for subset_seed in 0..4 {
            let mut subset = common::random_subset(n, 9, seed * 17 + subset_seed);
            if !subset.contains(&planted) {
                subset.pop();
                subset.push(planted);
                subset.sort_unstable();
            }
            let idx = SparseIndexSet::from_fn(1, 1, |_, _| HeadIndices::unweighted(subset.clone()))
                .unwrap();
            let sparse =
                sparse_decode(&inst.config, &inst.cache, &[inst.seq], &inst.queries, &idx)
                    .unwrap();
            let err = max_rel_diff(sparse.output(0, 0), dense.output(0, 0));
            assert!(err < 1e-3, "seed {seed}/{subset_seed}: rel err {err}");
        }
    }
}

/// Attention weights sum to one: constant value rows must come back exactly.
#[test]
fn normalization_via_constant_values() {
    let d = 4;
    let n = 100;
    let inst = random_instance(n, d, 1, 2, 77);
    let mut cache = PagedKvCache::<f32>::new(1, d, 16).unwrap();
    let constant = [3.0f32, -1.5, 0.25, 8.0];
    let values: Vec<f32> = constant.iter().cycle().take(n * d).copied().collect();
    cache.append_tokens(SeqId(0), &inst.keys[0], &values, n).unwrap();

    let out = dense_decode(&inst.config, &cache, &[SeqId(0)], &inst.queries).unwrap();
    for h in 0..inst.config.num_q_heads {
        for dim in 0..d {
            let rel = (out.output(0, h)[dim] - constant[dim]).abs() / constant[dim].abs();
            assert!(rel < 1e-6, "head {h} dim {dim}: {}", out.output(0, h)[dim]);
        }
    }

    let weighted = SparseIndexSet::from_fn(1, inst.config.num_q_heads, |_, _| {
        HeadIndices::from_unsorted((0..n as u32).map(|i| (i, 1.0 + (i % 7) as f32)).collect())
    })
    .unwrap();
    let out = sparse_decode(&inst.config, &cache, &[SeqId(0)], &inst.queries, &weighted).unwrap();
    for h in 0..inst.config.num_q_heads {
        for dim in 0..d {
            let rel = (out.output(0, h)[dim] - constant[dim]).abs() / constant[dim].abs();
            assert!(rel < 1e-6, "weighted head {h} dim {dim}");
        }
    }
}

/// Half-precision storage runs the same code path; outputs stay close to the
/// f32-storage result on f16-representable data.
#[test]
fn half_precision_storage_matches_on_representable_data() {
    use half::f16;
    let d = 16;
    let n = 200;
    let inst = random_instance(n, d, 2, 2, 4242);

    // Round the instance data through f16 and build both caches from it.
    let as_f16 = |xs: &[f32]| -> Vec<f16> { xs.iter().map(|&x| f16::from_f32(x)).collect() };
    let back = |xs: &[f16]| -> Vec<f32> { xs.iter().map(|x| x.to_f32()).collect() };

    let mut flat_k = Vec::new();
    let mut flat_v = Vec::new();
    for t in 0..n {
        for kvh in 0..2 {
            flat_k.extend_from_slice(&inst.keys[kvh][t * d..(t + 1) * d]);
            flat_v.extend_from_slice(&inst.values[kvh][t * d..(t + 1) * d]);
        }
    }
    let hk = as_f16(&flat_k);
    let hv = as_f16(&flat_v);

    let mut half_cache = PagedKvCache::<f16>::new(2, d, 16).unwrap();
    half_cache.append_tokens(SeqId(0), &hk, &hv, n).unwrap();
    let mut single_cache = PagedKvCache::<f32>::new(2, d, 16).unwrap();
    single_cache
        .append_tokens(SeqId(0), &back(&hk), &back(&hv), n)
        .unwrap();

    let q16: Vec<f16> = inst
        .queries
        .query(0, 0)
        .iter()
        .chain(inst.queries.query(0, 1))
        .chain(inst.queries.query(0, 2))
        .chain(inst.queries.query(0, 3))
        .map(|&x| f16::from_f32(x))
        .collect();
    let hq = QueryBlock::new(q16.clone(), 1, 4, d).unwrap();
    let sq = QueryBlock::new(back(&q16), 1, 4, d).unwrap();

    let cfg = AttentionConfig::new(4, 2, d).unwrap();
    let a = dense_decode(&cfg, &half_cache, &[SeqId(0)], &hq).unwrap();
    let b = dense_decode(&cfg, &single_cache, &[SeqId(0)], &sq).unwrap();
    for h in 0..4 {
        // Same f32 math over identical (rounded) inputs: bit-equal outputs.
        assert_eq!(a.output(0, h), b.output(0, h), "head {h}");
    }
}
