//! Analytic per-decode-step byte-traffic model.
//!
//! Three regimes read memory differently each step: dense reads the whole KV
//! cache (`2*B*N*H_kv*D*w` bytes), sparse gathers `k` rows per query head
//! (`2*B*H_q*k*D*w` without dedup — under GQA this amplifies traffic by the
//! group size, which is why sparse decode loses below `S = G`), and a fixed
//! recurrent state reads `B*H_kv*D*D*w` independent of context length.
//!
//! Speedup prediction converts bytes to time through a two-scalar
//! calibration (effective bandwidth plus a per-step overhead) fitted to
//! measured dense latencies. The overhead scalar is what makes small-batch
//! speedups saturate instead of growing with `S` forever.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::selectors::{budget_from_sparsity, SelectError, SelectorSpec};

#[derive(Debug, Error)]
pub enum TrafficError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("calibration table is empty")]
    EmptyCalibration,

    #[error("calibration latencies must strictly increase with batch size: {0}")]
    NonMonotoneCalibration(String),

    #[error(transparent)]
    Select(#[from] SelectError),
}

/// Decode-step workload shape: batch, context, heads, head dimension, element
/// width, page size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadGeometry {
    pub batch: usize,
    pub context: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub element_width: usize,
    pub page_size: usize,
}

impl WorkloadGeometry {
    pub fn validate(&self) -> Result<(), TrafficError> {
        if self.num_q_heads == 0
            || self.num_kv_heads == 0
            || self.head_dim == 0
            || self.page_size == 0
        {
            return Err(TrafficError::InvalidGeometry(
                "head counts, head_dim and page_size must be >= 1".into(),
            ));
        }
        if self.num_q_heads % self.num_kv_heads != 0 {
            return Err(TrafficError::InvalidGeometry(format!(
                "num_q_heads ({}) must be a multiple of num_kv_heads ({})",
                self.num_q_heads, self.num_kv_heads
            )));
        }
        if self.element_width != 2 && self.element_width != 4 {
            return Err(TrafficError::InvalidGeometry(format!(
                "element_width must be 2 or 4, got {}",
                self.element_width
            )));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.num_q_heads / self.num_kv_heads
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    /// 128K-context GQA kernel geometry: Hq=32, Hkv=8, D=128, fp16, page 16.
    pub fn gqa_128k(batch: usize) -> Self {
        Self {
            batch,
            context: 131072,
            num_q_heads: 32,
            num_kv_heads: 8,
            head_dim: 128,
            element_width: 2,
            page_size: 16,
        }
    }

    /// Same geometry with Hkv = Hq = 32 (MHA).
    pub fn mha_128k(batch: usize) -> Self {
        Self {
            num_kv_heads: 32,
            ..Self::gqa_128k(batch)
        }
    }
}

/// Dense decode bytes per step: keys and values read once per kv head.
pub fn estimate_dense(geom: &WorkloadGeometry) -> u64 {
    2 * geom.batch as u64
        * geom.context as u64
        * geom.num_kv_heads as u64
        * geom.head_dim as u64
        * geom.element_width as u64
}

/// Sparse decode bytes per step for `k` selected rows per query head.
///
/// Without dedup every query head gathers its own rows (worst case, and what
/// the engine's sparse path actually does). With dedup, rows are shared
/// within a GQA group and `k` is replaced by the expected union size of `G`
/// independent k-subsets, `E = N * (1 - (1 - k/N)^G)`, rounded to the nearest
/// row.
pub fn estimate_sparse(geom: &WorkloadGeometry, k: usize, dedup: bool) -> u64 {
    let row_bytes = 2 * geom.head_dim as u64 * geom.element_width as u64;
    if !dedup {
        return geom.batch as u64 * geom.num_q_heads as u64 * k as u64 * row_bytes;
    }
    let n = geom.context as f64;
    let g = geom.group_size() as i32;
    let union = n * (1.0 - (1.0 - k as f64 / n).powi(g));
    geom.batch as u64 * geom.num_kv_heads as u64 * union.round() as u64 * row_bytes
}

/// Fixed-state regime bytes per step: a D x D state per kv head, constant in N.
pub fn estimate_fixed_state(geom: &WorkloadGeometry) -> u64 {
    geom.batch as u64
        * geom.num_kv_heads as u64
        * geom.head_dim as u64
        * geom.head_dim as u64
        * geom.element_width as u64
}

/// Per-step bytes an index-selection mechanism reads, plus whether the
/// mechanism is deployable or a measurement instrument.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexerCost {
    pub bytes: u64,
    /// Oracle-scored selectors read the full keys to rank them; that is an
    /// instrument for isolating sparsity effects, not a deployable indexer,
    /// and deployable-regime predictions exclude it.
    pub deployable: bool,
}

/// Bytes the indexer scans per step: the channel sketch for double sparsity,
/// or the full key pass for oracle-scored selectors.
pub fn estimate_indexer(geom: &WorkloadGeometry, spec: &SelectorSpec) -> IndexerCost {
    match spec {
        SelectorSpec::DoubleSparsity {
            channels,
            sketch_width,
            ..
        } => IndexerCost {
            bytes: geom.batch as u64
                * geom.num_kv_heads as u64
                * geom.context as u64
                * *channels as u64
                * *sketch_width as u64,
            deployable: true,
        },
        SelectorSpec::OracleTopk { .. }
        | SelectorSpec::SinkLocalHeavy { .. }
        | SelectorSpec::Stochastic { .. } => IndexerCost {
            bytes: estimate_dense(geom),
            deployable: false,
        },
    }
}

/// Untuned sketch-scan indexer kernels run far below the gather kernel's
/// effective bandwidth; deployable-indexer time is charged at this multiple
/// of its raw bytes.
pub const INDEXER_BANDWIDTH_DERATE: f64 = 12.0;

/// One measured dense latency and its fitted overhead residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub batch: usize,
    pub dense_ms: f64,
    /// Residual `dense_ms - bytes/bandwidth` after fitting; diagnostic only.
    pub fitted_overhead_ms: f64,
}

/// Measured dense latencies per batch size for one geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub entries: Vec<CalibrationEntry>,
}

impl CalibrationTable {
    pub fn new(points: &[(usize, f64)]) -> Result<Self, TrafficError> {
        if points.is_empty() {
            return Err(TrafficError::EmptyCalibration);
        }
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 || w[1].1 <= w[0].1 {
                return Err(TrafficError::NonMonotoneCalibration(format!(
                    "B={} at {:.4} ms then B={} at {:.4} ms",
                    w[0].0, w[0].1, w[1].0, w[1].1
                )));
            }
        }
        Ok(Self {
            entries: points
                .iter()
                .map(|&(batch, dense_ms)| CalibrationEntry {
                    batch,
                    dense_ms,
                    fitted_overhead_ms: 0.0,
                })
                .collect(),
        })
    }

    /// Dense decode latencies of the 128K GQA kernel baseline on H100, per
    /// batch size 1, 4, 8, 16.
    pub fn h100_gqa_128k() -> Self {
        Self::new(&[(1, 0.19), (4, 0.72), (8, 1.50), (16, 3.08)]).expect("static table is valid")
    }
}

/// Two fitted scalars: effective bandwidth and per-step overhead.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub bytes_per_ms: f64,
    pub overhead_ms: f64,
    pub table: CalibrationTable,
}

impl Calibration {
    /// Fit bandwidth and overhead to measured dense latencies.
    ///
    /// The two smallest batches anchor the fit: bandwidth from the marginal
    /// cost between them, overhead as the smallest batch's residual. Larger
    /// batches in this regime drift mildly superlinear and would drag a
    /// whole-column intercept negative, which no launch overhead is. The
    /// overhead is floored at zero; per-batch residuals against the fitted
    /// bandwidth are kept in the table for inspection.
    pub fn fit(geom: &WorkloadGeometry, table: &CalibrationTable) -> Result<Self, TrafficError> {
        geom.validate()?;
        let mut table = table.clone();
        let bytes_at = |batch: usize| estimate_dense(&geom.with_batch(batch)) as f64;

        let (bytes_per_ms, overhead_ms) = if table.entries.len() == 1 {
            let e = &table.entries[0];
            (bytes_at(e.batch) / e.dense_ms, 0.0)
        } else {
            let lo = table.entries[0];
            let hi = table.entries[1];
            let bw = (bytes_at(hi.batch) - bytes_at(lo.batch)) / (hi.dense_ms - lo.dense_ms);
            let overhead = (lo.dense_ms - bytes_at(lo.batch) / bw).max(0.0);
            (bw, overhead)
        };

        for e in &mut table.entries {
            e.fitted_overhead_ms = e.dense_ms - bytes_at(e.batch) / bytes_per_ms;
        }
        Ok(Self {
            bytes_per_ms,
            overhead_ms,
            table,
        })
    }

    /// Model time for one decode step moving `bytes`.
    pub fn time_ms(&self, bytes: u64) -> f64 {
        bytes as f64 / self.bytes_per_ms + self.overhead_ms
    }

    /// Calibrated dense latency for a geometry.
    pub fn dense_ms(&self, geom: &WorkloadGeometry) -> f64 {
        self.time_ms(estimate_dense(geom))
    }
}

/// Full per-step estimate for one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrafficEstimate {
    pub dense_bytes: u64,
    pub sparse_bytes: u64,
    pub indexer_bytes: u64,
    pub indexer_deployable: bool,
    pub fixed_state_bytes: u64,
    pub predicted_speedup: f64,
    pub overhead_ms: f64,
}

/// Model time of the sparse path: backend gather plus, for deployable
/// indexers only, the derated indexer scan. Oracle-scored selectors are
/// instruments and contribute no time (the backend-only regime).
fn sparse_time_ms(
    geom: &WorkloadGeometry,
    k: usize,
    indexer: Option<&SelectorSpec>,
    cal: &Calibration,
) -> f64 {
    let mut time = cal.time_ms(estimate_sparse(geom, k, false));
    if let Some(spec) = indexer {
        let cost = estimate_indexer(geom, spec);
        if cost.deployable {
            time += INDEXER_BANDWIDTH_DERATE * cost.bytes as f64 / cal.bytes_per_ms;
        }
    }
    time
}

/// Predicted dense/sparse speedup for `k` selected rows per query head.
pub fn predict_speedup(
    geom: &WorkloadGeometry,
    k: usize,
    indexer: Option<&SelectorSpec>,
    cal: &Calibration,
) -> f64 {
    cal.dense_ms(geom) / sparse_time_ms(geom, k, indexer, cal)
}

/// Predicted speedup at sparsity factor `s` (budget `ceil(N/s)` per head).
pub fn predict_speedup_at_sparsity(
    geom: &WorkloadGeometry,
    s: f64,
    indexer: Option<&SelectorSpec>,
    cal: &Calibration,
) -> Result<f64, TrafficError> {
    let k = budget_from_sparsity(s, geom.context)?;
    Ok(predict_speedup(geom, k, indexer, cal))
}

/// Bundle every regime's bytes with the calibrated prediction.
pub fn estimate(
    geom: &WorkloadGeometry,
    k: usize,
    indexer: Option<&SelectorSpec>,
    cal: &Calibration,
) -> TrafficEstimate {
    let indexer_cost = indexer.map(|spec| estimate_indexer(geom, spec));
    TrafficEstimate {
        dense_bytes: estimate_dense(geom),
        sparse_bytes: estimate_sparse(geom, k, false),
        indexer_bytes: indexer_cost.map_or(0, |c| c.bytes),
        indexer_deployable: indexer_cost.map_or(false, |c| c.deployable),
        fixed_state_bytes: estimate_fixed_state(geom),
        predicted_speedup: predict_speedup(geom, k, indexer, cal),
        overhead_ms: cal.overhead_ms,
    }
}

/// Smallest sparsity factor at which the sparse path breaks even.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BreakEven {
    At(f64),
    /// No crossing in `S` up to 1000: the sparse path never wins.
    Unbounded,
}

/// Bisect for the smallest `S` in `[1, 1000]` with predicted speedup >= 1.
pub fn break_even_sparsity(
    geom: &WorkloadGeometry,
    indexer: Option<&SelectorSpec>,
    cal: &Calibration,
) -> Result<BreakEven, TrafficError> {
    let wins = |s: f64| -> Result<bool, TrafficError> {
        Ok(predict_speedup_at_sparsity(geom, s, indexer, cal)? >= 1.0)
    };
    if !wins(1000.0)? {
        return Ok(BreakEven::Unbounded);
    }
    if wins(1.0)? {
        return Ok(BreakEven::At(1.0));
    }
    let (mut lo, mut hi) = (1.0f64, 1000.0f64);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if wins(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(BreakEven::At(hi))
}
