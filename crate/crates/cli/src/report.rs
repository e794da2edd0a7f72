//! Table rendering: CSV (round-trippable), markdown in the kernel-table
//! layout (rows = batch sizes, columns = baseline ms then one speedup cell
//! per sparsity factor), and JSON.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::Format;
use crate::error::BenchError;
use crate::sweep::RunRecord;

pub fn emit(records: &[RunRecord], format: Format) -> Result<String, BenchError> {
    if records.is_empty() {
        return Err(BenchError::Usage("no records to emit".into()));
    }
    match format {
        Format::Csv => emit_csv(records),
        Format::Markdown => Ok(emit_markdown(records)),
        Format::Json => Ok(serde_json::to_string_pretty(records)? + "\n"),
    }
}

pub fn emit_csv(records: &[RunRecord]) -> Result<String, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for rec in records {
        w.serialize(rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| csv_err(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_csv(text: &str) -> Result<Vec<RunRecord>, BenchError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|rec| rec.map_err(csv_err))
        .collect()
}

fn csv_err(e: csv::Error) -> BenchError {
    BenchError::Io(std::io::Error::other(e))
}

/// Markdown table: one row per batch size, a baseline latency column, then
/// one `X.XX×` speedup cell per sparsity factor.
pub fn emit_markdown(records: &[RunRecord]) -> String {
    let mut sparsities: Vec<f64> = Vec::new();
    for rec in records {
        if let Some(s) = rec.sparsity {
            if !sparsities.contains(&s) {
                sparsities.push(s);
            }
        }
    }
    sparsities.sort_by(|a, b| a.total_cmp(b));

    let mut by_batch: BTreeMap<usize, Vec<&RunRecord>> = BTreeMap::new();
    for rec in records {
        by_batch.entry(rec.batch).or_default().push(rec);
    }

    let fmt_s = |s: f64| {
        if s == s.trunc() {
            format!("{}x", s as u64)
        } else {
            format!("{s}x")
        }
    };

    let mut out = String::new();
    out.push_str("| B | baseline (ms) |");
    for &s in &sparsities {
        out.push_str(&format!(" {} |", fmt_s(s)));
    }
    out.push('\n');
    out.push_str("|---|---|");
    for _ in &sparsities {
        out.push_str("---|");
    }
    out.push('\n');

    for (batch, rows) in &by_batch {
        out.push_str(&format!("| {batch} | {:.2} |", rows[0].dense_ms));
        for &s in &sparsities {
            let cell = rows
                .iter()
                .find(|r| r.sparsity == Some(s))
                .and_then(|r| r.measured_speedup.or(r.predicted_speedup));
            match cell {
                Some(v) => out.push_str(&format!(" {v:.2}× |")),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

/// One row of the analytic (no-execution) model sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub batch: usize,
    pub sparsity: f64,
    /// "backend" (selection excluded) or "indexer-inclusive".
    pub regime: String,
    pub dense_ms_calibrated: f64,
    pub predicted_speedup: f64,
    pub measured_speedup: Option<f64>,
}

pub fn emit_model_csv(rows: &[ModelRow]) -> Result<String, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| csv_err(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Model rows rendered in the same layout as the measured table.
pub fn emit_model_markdown(rows: &[ModelRow]) -> String {
    let records: Vec<RunRecord> = rows
        .iter()
        .map(|r| RunRecord {
            batch: r.batch,
            sparsity: Some(r.sparsity),
            dense_ms: r.dense_ms_calibrated,
            sparse_ms: None,
            measured_speedup: r.measured_speedup,
            predicted_speedup: Some(r.predicted_speedup),
            bytes_dense: 0,
            bytes_sparse: None,
            bytes_indexer: None,
            max_output_rel_error: None,
        })
        .collect();
    emit_markdown(&records)
}
