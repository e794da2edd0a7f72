//! Collapse-witness reports over seeded random value matrices.

use serde::Serialize;

use sparse_decode::collapse::{
    find_collapse_pair, min_width_for_injectivity, verify_witness, CollapseWitness, ValueMatrix,
    WitnessReport,
};

use crate::error::BenchError;

/// Verification tolerance for reported witnesses.
pub const WITNESS_TOL: f64 = 1e-9;

#[derive(Debug, Serialize)]
pub struct CollapseRunReport {
    pub n: usize,
    pub d: usize,
    pub beta: f64,
    pub seed: u64,
    pub min_width_for_injectivity: usize,
    pub witness: Option<CollapseWitness>,
    pub verification: Option<WitnessReport>,
    pub no_witness: Option<String>,
    /// True when a verified witness was found, or when none exists and the
    /// width is at or above the injectivity threshold.
    pub pass: bool,
}

/// Draw a random `n x d` value matrix and try to build and verify a
/// collapse witness at the given `beta`.
pub fn run_collapse(n: usize, d: usize, beta: f64, seed: u64) -> Result<CollapseRunReport, BenchError> {
    if n < 2 {
        return Err(BenchError::Usage(format!("n must be >= 2, got {n}")));
    }
    if d == 0 {
        return Err(BenchError::Usage("d must be >= 1".into()));
    }
    let v = ValueMatrix::gaussian(n, d, seed)?;
    let witness = find_collapse_pair(&v, beta)?;
    let (verification, no_witness, pass) = match &witness {
        Some(w) => {
            let report = verify_witness(&v, w, WITNESS_TOL);
            let ok = report.pass();
            (Some(report), None, ok)
        }
        None => (
            None,
            Some(format!(
                "no witness (d >= N-1): stacked matrix has full row rank at N={n}, d={d}"
            )),
            d >= n - 1,
        ),
    };
    Ok(CollapseRunReport {
        n,
        d,
        beta,
        seed,
        min_width_for_injectivity: min_width_for_injectivity(n),
        witness,
        verification,
        no_witness,
        pass,
    })
}
