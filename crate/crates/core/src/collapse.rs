//! Attention-output collapse: when the hidden width cannot carry the simplex.
//!
//! The map `a -> V^T a` from attention distributions to outputs factors an
//! N-dimensional simplex through a d-dimensional space. For `d < N - 1` the
//! stacked matrix `[V | 1]` has a nontrivial left null space, so there is a
//! zero-sum direction `z` with `V^T z = 0`; perturbing the uniform
//! distribution by `±(beta/N) z` yields two distinct full-support
//! distributions with identical outputs. This module builds such witness
//! pairs constructively and verifies them, all in double precision.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CollapseError {
    #[error("value matrix needs at least 2 rows, got {0}")]
    TooFewRows(usize),

    #[error("value matrix must have at least 1 column")]
    NoColumns,

    #[error("value matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("beta must lie in the open interval (0, 1), got {0}")]
    BetaOutOfRange(f64),
}

/// Relative singular-value threshold below which the stacked matrix is
/// treated as rank deficient.
pub const RANK_EPS: f64 = 1e-10;

/// An `N x d` value matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueMatrix {
    m: DMatrix<f64>,
}

impl ValueMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self, CollapseError> {
        if m.nrows() < 2 {
            return Err(CollapseError::TooFewRows(m.nrows()));
        }
        if m.ncols() == 0 {
            return Err(CollapseError::NoColumns);
        }
        for row in 0..m.nrows() {
            for col in 0..m.ncols() {
                if !m[(row, col)].is_finite() {
                    return Err(CollapseError::NonFinite { row, col });
                }
            }
        }
        Ok(Self { m })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, CollapseError> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        Self::new(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
    }

    /// Seeded standard-normal matrix.
    pub fn gaussian(n: usize, d: usize, seed: u64) -> Result<Self, CollapseError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(DMatrix::from_fn(n, d, |_, _| {
            StandardNormal.sample(&mut rng)
        }))
    }

    pub fn rows(&self) -> usize {
        self.m.nrows()
    }

    pub fn cols(&self) -> usize {
        self.m.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// `V^T x`.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        self.m.transpose() * x
    }
}

/// Two distinct full-support attention distributions mapped to the same
/// output, plus the zero-sum direction they were built from.
#[derive(Debug, Clone, Serialize)]
pub struct CollapseWitness {
    pub a: Vec<f64>,
    pub a_prime: Vec<f64>,
    pub z: Vec<f64>,
    pub beta: f64,
    /// `max_j |V^T (a - a')|_j` at construction time.
    pub residual: f64,
}

/// A nonzero direction in the null space of `[V | 1]^T`: orthogonal to every
/// value column and zero-sum, rescaled to unit infinity norm. Returns `None`
/// when the stacked matrix has full row rank (no such direction exists).
pub fn null_zero_sum_direction(v: &ValueMatrix) -> Option<DVector<f64>> {
    let n = v.rows();
    let d = v.cols();

    // Stack the simplex-sum constraint as an extra column.
    let mut stacked = DMatrix::zeros(n, d + 1);
    stacked.view_mut((0, 0), (n, d)).copy_from(v.matrix());
    stacked.view_mut((0, d), (n, 1)).fill(1.0);

    let svd = stacked.svd(true, false);
    let u = svd.u.as_ref().expect("u requested");
    let sigma_max = svd.singular_values.max();
    let threshold = RANK_EPS * sigma_max;
    let range_cols: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > threshold)
        .collect();
    let rank = range_cols.len();
    if rank >= n {
        return None;
    }

    // The complement of col([V | 1]) is the null space of the stacked map.
    // Project out the range from the canonical basis vector with the most
    // mass left in the complement.
    let probe = (0..n)
        .min_by(|&a, &b| {
            let mass = |j: usize| -> f64 { range_cols.iter().map(|&c| u[(j, c)].powi(2)).sum() };
            mass(a).total_cmp(&mass(b))
        })
        .expect("n >= 2");

    let mut z = DVector::zeros(n);
    z[probe] = 1.0;
    for _ in 0..2 {
        for &c in &range_cols {
            let col = u.column(c);
            let coeff = col.dot(&z);
            z.axpy(-coeff, &col.clone_owned(), 1.0);
        }
    }

    let inf_norm = z.amax();
    debug_assert!(inf_norm > 0.0);
    Some(z / inf_norm)
}

/// Build a collapse witness around the uniform distribution:
/// `a = a0 + (beta/N) z`, `a' = a0 - (beta/N) z`. Returns `None` exactly when
/// no zero-sum null direction exists.
pub fn find_collapse_pair(
    v: &ValueMatrix,
    beta: f64,
) -> Result<Option<CollapseWitness>, CollapseError> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(CollapseError::BetaOutOfRange(beta));
    }
    let Some(z) = null_zero_sum_direction(v) else {
        return Ok(None);
    };
    let n = v.rows();
    let step = beta / n as f64;
    let uniform = 1.0 / n as f64;
    let a: DVector<f64> = DVector::from_fn(n, |i, _| uniform + step * z[i]);
    let a_prime: DVector<f64> = DVector::from_fn(n, |i, _| uniform - step * z[i]);
    let residual = v.project(&(&a - &a_prime)).amax();
    Ok(Some(CollapseWitness {
        a: a.as_slice().to_vec(),
        a_prime: a_prime.as_slice().to_vec(),
        z: z.as_slice().to_vec(),
        beta,
        residual,
    }))
}

/// Smallest hidden width under which `a -> V^T a` can be injective on the
/// simplex over `n` tokens: `n - 1`.
pub fn min_width_for_injectivity(n: usize) -> usize {
    debug_assert!(n >= 2);
    n - 1
}

/// Outcome of every witness check, reported separately.
#[derive(Debug, Clone, Serialize)]
pub struct WitnessReport {
    pub distinct: bool,
    pub sums_to_one: bool,
    pub support_bounds: bool,
    pub z_unit_inf_norm: bool,
    pub z_zero_sum: bool,
    pub residual_within_tol: bool,
    pub max_sum_error: f64,
    pub min_coordinate: f64,
    pub max_coordinate: f64,
    pub z_sum_abs: f64,
    pub residual: f64,
    pub tol: f64,
}

impl WitnessReport {
    pub fn pass(&self) -> bool {
        self.distinct
            && self.sums_to_one
            && self.support_bounds
            && self.z_unit_inf_norm
            && self.z_zero_sum
            && self.residual_within_tol
    }
}

/// Tolerance for the witness's exact-arithmetic identities (sums, norms).
const IDENTITY_TOL: f64 = 1e-12;

/// Recompute every witness invariant from scratch against `v`.
pub fn verify_witness(v: &ValueMatrix, w: &CollapseWitness, tol: f64) -> WitnessReport {
    let n = v.rows();
    let a = DVector::from_column_slice(&w.a);
    let a_prime = DVector::from_column_slice(&w.a_prime);
    let z = DVector::from_column_slice(&w.z);

    let distinct = w.a != w.a_prime;
    let sum_err_a = (a.sum() - 1.0).abs();
    let sum_err_b = (a_prime.sum() - 1.0).abs();

    let lo = (1.0 - w.beta) / n as f64;
    let hi = (1.0 + w.beta) / n as f64;
    let coords = w.a.iter().chain(w.a_prime.iter());
    let min_coordinate = coords.clone().copied().fold(f64::INFINITY, f64::min);
    let max_coordinate = coords.copied().fold(f64::NEG_INFINITY, f64::max);
    let support_bounds =
        min_coordinate >= lo - IDENTITY_TOL && max_coordinate <= hi + IDENTITY_TOL;

    let z_sum_abs = z.sum().abs();
    let residual = v.project(&(&a - &a_prime)).amax();

    WitnessReport {
        distinct,
        sums_to_one: sum_err_a <= IDENTITY_TOL && sum_err_b <= IDENTITY_TOL,
        support_bounds,
        z_unit_inf_norm: (z.amax() - 1.0).abs() <= IDENTITY_TOL,
        z_zero_sum: z_sum_abs <= IDENTITY_TOL,
        residual_within_tol: residual <= tol,
        max_sum_error: sum_err_a.max(sum_err_b),
        min_coordinate,
        max_coordinate,
        z_sum_abs,
        residual,
        tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn symmetry_4x2() -> ValueMatrix {
        ValueMatrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ])
        .unwrap()
    }

    #[test]
    fn min_width_matches_the_threshold() {
        assert_eq!(min_width_for_injectivity(2), 1);
        assert_eq!(min_width_for_injectivity(4), 3);
        assert_eq!(min_width_for_injectivity(1_000_000), 999_999);
    }

    #[test]
    fn symmetry_case_collapses_to_the_column_means() {
        let v = symmetry_4x2();
        let w = find_collapse_pair(&v, 0.5).unwrap().expect("d=2 < N-1=3");
        let report = verify_witness(&v, &w, 1e-9);
        assert!(report.pass(), "{report:?}");

        // Whatever null direction is found, both outputs equal V^T a0.
        let out = v.project(&DVector::from_column_slice(&w.a));
        assert!((out[0] - 0.5).abs() < 1e-12);
        assert!((out[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn hand_built_symmetry_witness_verifies() {
        let v = symmetry_4x2();
        let w = CollapseWitness {
            a: vec![0.375, 0.125, 0.125, 0.375],
            a_prime: vec![0.125, 0.375, 0.375, 0.125],
            z: vec![1.0, -1.0, -1.0, 1.0],
            beta: 0.5,
            residual: 0.0,
        };
        assert!(verify_witness(&v, &w, 1e-9).pass());
    }

    #[test]
    fn wide_enough_hidden_dim_has_no_witness() {
        // Generic Gaussian V with d >= N-1 has full stacked rank.
        for seed in 0..5 {
            let v = ValueMatrix::gaussian(5, 4, seed).unwrap();
            assert!(find_collapse_pair(&v, 0.5).unwrap().is_none(), "seed {seed}");
            let v = ValueMatrix::gaussian(6, 7, seed).unwrap();
            assert!(find_collapse_pair(&v, 0.5).unwrap().is_none(), "seed {seed}");
        }
    }

    #[test]
    fn narrow_hidden_dim_yields_tight_witnesses() {
        let v = ValueMatrix::gaussian(64, 16, 7).unwrap();
        let z = null_zero_sum_direction(&v).expect("N - d - 1 = 47 > 0");
        assert!(v.project(&z).amax() <= 1e-10);
        assert!(z.sum().abs() <= 1e-10);
        assert!((z.amax() - 1.0).abs() <= 1e-12);

        let w = find_collapse_pair(&v, 0.9).unwrap().unwrap();
        let report = verify_witness(&v, &w, 1e-10);
        assert!(report.pass(), "{report:?}");
        // Coordinates stay inside [(1-beta)/N, (1+beta)/N].
        assert!(report.min_coordinate >= 0.1 / 64.0 - 1e-12);
        assert!(report.max_coordinate <= 1.9 / 64.0 + 1e-12);
    }

    #[test]
    fn beta_must_be_in_the_open_unit_interval() {
        let v = symmetry_4x2();
        assert!(matches!(
            find_collapse_pair(&v, 1.0),
            Err(CollapseError::BetaOutOfRange(_))
        ));
        assert!(matches!(
            find_collapse_pair(&v, 0.0),
            Err(CollapseError::BetaOutOfRange(_))
        ));
        assert!(find_collapse_pair(&v, 0.999).is_ok());
    }

    #[test]
    fn verify_rejects_identical_pair() {
        let v = symmetry_4x2();
        let w = CollapseWitness {
            a: vec![0.25; 4],
            a_prime: vec![0.25; 4],
            z: vec![1.0, -1.0, -1.0, 1.0],
            beta: 0.5,
            residual: 0.0,
        };
        let report = verify_witness(&v, &w, 1e-9);
        assert!(!report.distinct);
        assert!(!report.pass());
    }

    #[test]
    fn verify_rejects_perturbed_direction() {
        let v = ValueMatrix::gaussian(32, 8, 3).unwrap();
        let mut w = find_collapse_pair(&v, 0.5).unwrap().unwrap();
        assert!(verify_witness(&v, &w, 1e-9).pass());
        // Corrupt the pair through a perturbed z.
        w.z[0] += 1e-3;
        let n = v.rows() as f64;
        for i in 0..v.rows() {
            w.a[i] = 1.0 / n + w.beta / n * w.z[i];
            w.a_prime[i] = 1.0 / n - w.beta / n * w.z[i];
        }
        let report = verify_witness(&v, &w, 1e-9);
        assert!(!report.residual_within_tol, "{report:?}");
        assert!(!report.pass());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let err = ValueMatrix::from_rows(&[vec![1.0, f64::NAN], vec![0.0, 1.0]]).unwrap_err();
        assert!(matches!(err, CollapseError::NonFinite { row: 0, col: 1 }));
        assert!(ValueMatrix::from_rows(&[vec![1.0]]).is_err());
    }
}
