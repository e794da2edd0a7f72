//! The benchmark sweep: timed dense vs sparse decode over (batch, sparsity)
//! points, with inline correctness and byte-accounting assertions.
//!
//! Selection runs outside the timed region (the backend-only regime);
//! the timed region covers gather plus weighted attention. Index sets,
//! byte counts, and table structure are deterministic given the config;
//! timings of course are not.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use sparse_decode::attention::{dense_decode, sparse_decode, HeadIndices};
use sparse_decode::kv_store::{PagedKvCache, SeqId};
use sparse_decode::scalar::widen;
use sparse_decode::selectors::select_index_set;
use sparse_decode::traffic::{
    estimate_dense, estimate_indexer, estimate_sparse, predict_speedup, Calibration,
    CalibrationTable,
};
use sparse_decode::{AttentionConfig, QueryBlock, Scalar, SelectorSpec, WorkloadGeometry};

use crate::config::{BenchConfig, Dtype};
use crate::error::BenchError;
use crate::workload::{generate_workload, Workload, WorkloadMode};

/// Sparse output must match the masked-softmax reference this tightly.
pub const INLINE_ORACLE_TOL: f64 = 1e-4;

/// One (batch, sparsity) sweep point. Rows with `sparsity: None` are
/// dense-only baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub batch: usize,
    pub sparsity: Option<f64>,
    pub dense_ms: f64,
    pub sparse_ms: Option<f64>,
    pub measured_speedup: Option<f64>,
    pub predicted_speedup: Option<f64>,
    pub bytes_dense: u64,
    pub bytes_sparse: Option<u64>,
    pub bytes_indexer: Option<u64>,
    pub max_output_rel_error: Option<f64>,
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.total_cmp(b));
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Run the configured sweep and return one record per (batch, sparsity)
/// point (one dense-only record per batch if no sparsity levels are set).
pub fn run_sweep(config: &BenchConfig) -> Result<Vec<RunRecord>, BenchError> {
    config.validate()?;
    match config.dtype {
        Dtype::F16 => run_sweep_typed::<half::f16>(config),
        Dtype::F32 => run_sweep_typed::<f32>(config),
    }
}

fn run_sweep_typed<T: Scalar>(config: &BenchConfig) -> Result<Vec<RunRecord>, BenchError> {
    let mut records: Vec<RunRecord> = Vec::new();
    let mut dense_points: Vec<(usize, f64)> = Vec::new();

    for &batch in &config.batches {
        let geom = config.geometry(batch);
        let workload =
            generate_workload::<T>(&geom, config.seed, WorkloadMode::Random, config.memory_cap_bytes)?;
        let attn_cfg = AttentionConfig::new(geom.num_q_heads, geom.num_kv_heads, geom.head_dim)
            .map_err(BenchError::Attn)?;

        let expected_dense = estimate_dense(&geom);
        let mut dense_times = Vec::with_capacity(config.repeats);
        for i in 0..config.warmup + config.repeats {
            let before = workload.cache.bytes_read();
            let start = Instant::now();
            let out = dense_decode(&attn_cfg, &workload.cache, &workload.seqs, &workload.queries)?;
            let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
            let moved = workload.cache.bytes_read() - before;
            if moved != expected_dense {
                return Err(BenchError::ByteAccounting {
                    context: format!("dense decode at B={batch}"),
                    expected: expected_dense,
                    actual: moved,
                });
            }
            std::hint::black_box(&out);
            if i >= config.warmup {
                dense_times.push(elapsed_ms);
            }
        }
        let dense_ms = median(&mut dense_times);
        dense_points.push((batch, dense_ms));
        eprintln!("B={batch}: dense {dense_ms:.3} ms ({expected_dense} bytes/step)");

        if config.sparsity_levels.is_empty() {
            records.push(RunRecord {
                batch,
                sparsity: None,
                dense_ms,
                sparse_ms: None,
                measured_speedup: None,
                predicted_speedup: None,
                bytes_dense: expected_dense,
                bytes_sparse: None,
                bytes_indexer: None,
                max_output_rel_error: None,
            });
            continue;
        }

        for &s in &config.sparsity_levels {
            let spec = config.selector.at_sparsity(s);
            let rec = run_point(
                config, &geom, &workload, &attn_cfg, &spec, batch, s, dense_ms, expected_dense,
            )?;
            eprintln!(
                "B={batch} S={s}: sparse {:.3} ms, speedup {:.2}x, max rel err {:.2e}",
                rec.sparse_ms.unwrap(),
                rec.measured_speedup.unwrap(),
                rec.max_output_rel_error.unwrap()
            );
            records.push(rec);
        }
    }

    // Calibrate the model on this run's own dense latencies for the
    // predicted column. A failed fit (non-monotone timings) leaves the
    // prediction empty rather than failing the sweep.
    if let Ok(table) = CalibrationTable::new(&dense_points) {
        if let Ok(cal) = Calibration::fit(&config.geometry(config.batches[0]), &table) {
            for rec in &mut records {
                let Some(s) = rec.sparsity else { continue };
                let geom = config.geometry(rec.batch);
                let spec = config.selector.at_sparsity(s);
                let k = spec.effective_tokens(geom.context)?;
                rec.predicted_speedup = Some(predict_speedup(&geom, k, Some(&spec), &cal));
            }
        }
    }
    Ok(records)
}

#[allow(clippy::too_many_arguments)]
fn run_point<T: Scalar>(
    config: &BenchConfig,
    geom: &WorkloadGeometry,
    workload: &Workload<T>,
    attn_cfg: &AttentionConfig,
    spec: &SelectorSpec,
    batch: usize,
    s: f64,
    dense_ms: f64,
    expected_dense: u64,
) -> Result<RunRecord, BenchError> {
    // Selection cost is excluded from the timed region.
    let index_set = select_index_set(spec, &workload.cache, &workload.seqs, attn_cfg, &workload.queries)?;
    let k_eff = spec.effective_tokens(geom.context)?;
    let expected_sparse = estimate_sparse(geom, k_eff, false);
    let actual_rows = 2 * index_set.total_rows() * geom.head_dim as u64 * geom.element_width as u64;
    if actual_rows != expected_sparse {
        return Err(BenchError::ByteAccounting {
            context: format!("selector closed-form size at B={batch}, S={s}"),
            expected: expected_sparse,
            actual: actual_rows,
        });
    }

    let mut sparse_times = Vec::with_capacity(config.repeats);
    let mut last_output = None;
    for i in 0..config.warmup + config.repeats {
        let before = workload.cache.bytes_read();
        let start = Instant::now();
        let out = sparse_decode(
            attn_cfg,
            &workload.cache,
            &workload.seqs,
            &workload.queries,
            &index_set,
        )?;
        let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        let moved = workload.cache.bytes_read() - before;
        if moved != expected_sparse {
            return Err(BenchError::ByteAccounting {
                context: format!("sparse decode at B={batch}, S={s}"),
                expected: expected_sparse,
                actual: moved,
            });
        }
        if i >= config.warmup {
            sparse_times.push(elapsed_ms);
        }
        last_output = Some(out);
    }
    let sparse_ms = median(&mut sparse_times);
    let output = last_output.expect("repeats >= 1");

    // Inline correctness: the engine's sparse output against a
    // double-precision masked-softmax reference over the same indices.
    let mut max_rel = 0.0f64;
    for (b, &seq) in workload.seqs.iter().enumerate() {
        for h in 0..attn_cfg.num_q_heads {
            let head = index_set.get(b, h);
            let reference = masked_reference_f64(
                &workload.cache,
                seq,
                attn_cfg.kv_head_for(h),
                workload.queries.query(b, h),
                attn_cfg.scale,
                head,
            )?;
            let got = output.output(b, h);
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
            if rel > INLINE_ORACLE_TOL {
                return Err(BenchError::Correctness {
                    batch_size: batch,
                    sparsity: s,
                    batch_elem: b,
                    head: h,
                    rel_error: rel,
                    tol: INLINE_ORACLE_TOL,
                });
            }
            max_rel = max_rel.max(rel);
        }
    }

    Ok(RunRecord {
        batch,
        sparsity: Some(s),
        dense_ms,
        sparse_ms: Some(sparse_ms),
        measured_speedup: Some(dense_ms / sparse_ms),
        predicted_speedup: None,
        bytes_dense: expected_dense,
        bytes_sparse: Some(expected_sparse),
        bytes_indexer: Some(estimate_indexer(geom, spec).bytes),
        max_output_rel_error: Some(max_rel),
    })
}

/// Double-precision two-pass weighted softmax over the selected rows,
/// reading the cache through its uncounted accessors.
fn masked_reference_f64<T: Scalar>(
    cache: &PagedKvCache<T>,
    seq: SeqId,
    kv_head: usize,
    query: &[T],
    scale: f32,
    head: &HeadIndices,
) -> Result<Vec<f64>, BenchError> {
    let d = query.len();
    let mut q = Vec::new();
    widen(query, &mut q);
    let q: Vec<f64> = q.iter().map(|&x| x as f64).collect();

    let mut scores = Vec::with_capacity(head.len());
    for &t in head.indices() {
        let row = cache.key_row(seq, kv_head, t as usize)?;
        let dot: f64 = row
            .iter()
            .zip(&q)
            .map(|(&k, &qv)| k.as_f32() as f64 * qv)
            .sum();
        scores.push(scale as f64 * dot);
    }
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(i, &sc)| {
            let w = head.weights().map_or(1.0, |w| w[i] as f64);
            w * (sc - m).exp()
        })
        .collect();
    let denom: f64 = p.iter().sum();
    let mut out = vec![0.0f64; d];
    for (i, &t) in head.indices().iter().enumerate() {
        let row = cache.value_row(seq, kv_head, t as usize)?;
        let a = p[i] / denom;
        for (dim, &v) in row.iter().enumerate() {
            out[dim] += a * v.as_f32() as f64;
        }
    }
    Ok(out)
}
