//! Inline property suite over a configured geometry: the correctness checks
//! a sweep relies on, runnable on their own.

use sparse_decode::attention::{dense_decode, sparse_decode, SparseIndexSet};
use sparse_decode::kv_store::{PagedKvCache, SeqId};
use sparse_decode::selectors::select_index_set;
use sparse_decode::traffic::estimate_dense;
use sparse_decode::{AttentionConfig, Budget, QueryBlock, Scalar, SelectorSpec};

use crate::config::{BenchConfig, Dtype};
use crate::error::BenchError;
use crate::sweep::masked_reference_f64;
use crate::workload::{generate_workload, WorkloadMode};

#[derive(Debug, Clone)]
pub struct VerifyCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Run the property suite at the configured geometry (largest batch size).
/// Returns one entry per check; the caller decides how to report them.
pub fn run_verify(config: &BenchConfig) -> Result<Vec<VerifyCheck>, BenchError> {
    config.validate()?;
    match config.dtype {
        Dtype::F16 => run_verify_typed::<half::f16>(config),
        Dtype::F32 => run_verify_typed::<f32>(config),
    }
}

fn run_verify_typed<T: Scalar>(config: &BenchConfig) -> Result<Vec<VerifyCheck>, BenchError> {
    let batch = *config.batches.last().expect("validated non-empty");
    let geom = config.geometry(batch);
    let n = geom.context;
    let attn_cfg = AttentionConfig::new(geom.num_q_heads, geom.num_kv_heads, geom.head_dim)?;
    let workload =
        generate_workload::<T>(&geom, config.seed, WorkloadMode::Random, config.memory_cap_bytes)?;
    let mut checks = Vec::new();

    // Dense pass with byte accounting.
    let before = workload.cache.bytes_read();
    let dense = dense_decode(&attn_cfg, &workload.cache, &workload.seqs, &workload.queries)?;
    let dense_moved = workload.cache.bytes_read() - before;
    let dense_expected = estimate_dense(&geom);
    checks.push(VerifyCheck {
        name: "byte accounting (dense)",
        passed: dense_moved == dense_expected,
        detail: format!("counter {dense_moved}, model {dense_expected}"),
    });

    // Full-index sparse equals dense.
    let full = SparseIndexSet::full(geom.batch, geom.num_q_heads, n);
    let before = workload.cache.bytes_read();
    let sparse = sparse_decode(
        &attn_cfg,
        &workload.cache,
        &workload.seqs,
        &workload.queries,
        &full,
    )?;
    let sparse_moved = workload.cache.bytes_read() - before;
    let sparse_expected =
        2 * full.total_rows() * geom.head_dim as u64 * geom.element_width as u64;
    checks.push(VerifyCheck {
        name: "byte accounting (sparse)",
        passed: sparse_moved == sparse_expected,
        detail: format!("counter {sparse_moved}, model {sparse_expected}"),
    });

    let mut max_rel = 0.0f64;
    for b in 0..geom.batch {
        for h in 0..geom.num_q_heads {
            let want = dense.output(b, h);
            let got = sparse.output(b, h);
            let scale = want.iter().fold(0.0f32, |acc, &x| acc.max(x.abs())).max(1e-30);
            let rel = got
                .iter()
                .zip(want)
                .map(|(&g, &w)| (g - w).abs() / scale)
                .fold(0.0f32, f32::max);
            max_rel = max_rel.max(rel as f64);
        }
    }
    checks.push(VerifyCheck {
        name: "full-index equivalence",
        passed: max_rel < 1e-6,
        detail: format!("max rel err {max_rel:.2e} (tol 1e-6)"),
    });

    // Page-count law for every sequence.
    let mut page_law = true;
    for &seq in &workload.seqs {
        let table = workload.cache.page_table(seq)?;
        page_law &= table.num_pages() == n.div_ceil(geom.page_size);
    }
    checks.push(VerifyCheck {
        name: "page-count law",
        passed: page_law,
        detail: format!("pages = ceil({n} / {})", geom.page_size),
    });

    // Oracle top-k output against the double-precision masked reference, on
    // a few heads to keep verify quick at large geometries.
    let spec = SelectorSpec::OracleTopk {
        budget: Budget::Sparsity(8.0),
    };
    let idx = select_index_set(&spec, &workload.cache, &workload.seqs, &attn_cfg, &workload.queries)?;
    let out = sparse_decode(
        &attn_cfg,
        &workload.cache,
        &workload.seqs,
        &workload.queries,
        &idx,
    )?;
    let mut oracle_rel = 0.0f64;
    for b in [0, geom.batch - 1] {
        for h in [0, geom.num_q_heads - 1] {
            let head = idx.get(b, h);
            let reference = masked_reference_f64(
                &workload.cache,
                workload.seqs[b],
                attn_cfg.kv_head_for(h),
                workload.queries.query(b, h),
                attn_cfg.scale,
                head,
            )?;
            let got = out.output(b, h);
            let scale = reference
                .iter()
                .fold(0.0f64, |acc, &x| acc.max(x.abs()))
                .max(1e-30);
            let rel = got
                .iter()
                .zip(&reference)
                .map(|(&g, &r)| (g as f64 - r).abs())
                .fold(0.0f64, f64::max)
                / scale;
            oracle_rel = oracle_rel.max(rel);
        }
    }
    checks.push(VerifyCheck {
        name: "masked-softmax oracle (S=8)",
        passed: oracle_rel < crate::sweep::INLINE_ORACLE_TOL,
        detail: format!("max rel err {oracle_rel:.2e} (tol 1e-4)"),
    });

    // Normalization: constant value rows must come back unchanged.
    checks.push(constant_value_check::<T>(&attn_cfg, geom.page_size, config.seed)?);

    Ok(checks)
}

fn constant_value_check<T: Scalar>(
    attn_cfg: &AttentionConfig,
    page_size: usize,
    seed: u64,
) -> Result<VerifyCheck, BenchError> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    let n = 192;
    let d = attn_cfg.head_dim;
    let kv_heads = attn_cfg.num_kv_heads;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut cache = PagedKvCache::<T>::new(kv_heads, d, page_size)?;
    let constant = 0.8125f32; // exact in f16
    let keys: Vec<T> = (0..n * kv_heads * d)
        .map(|_| {
            let x: f32 = StandardNormal.sample(&mut rng);
            T::from_f32(x)
        })
        .collect();
    let values: Vec<T> = vec![T::from_f32(constant); n * kv_heads * d];
    cache.append_tokens(SeqId(0), &keys, &values, n)?;
    let q: Vec<T> = (0..attn_cfg.num_q_heads * d)
        .map(|_| {
            let x: f32 = StandardNormal.sample(&mut rng);
            T::from_f32(x)
        })
        .collect();
    let queries = QueryBlock::new(q, 1, attn_cfg.num_q_heads, d)?;
    let out = dense_decode(attn_cfg, &cache, &[SeqId(0)], &queries)?;
    let mut max_rel = 0.0f32;
    for h in 0..attn_cfg.num_q_heads {
        for &x in out.output(0, h) {
            max_rel = max_rel.max((x - constant).abs() / constant);
        }
    }
    Ok(VerifyCheck {
        name: "softmax normalization",
        passed: max_rel < 1e-6,
        detail: format!("constant-value drift {max_rel:.2e} (tol 1e-6)"),
    })
}
