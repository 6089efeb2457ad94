//! Polynomial least-squares regression on Brownian nodes.
//!
//! The conditional-expectation estimates in the backward solver regress
//! targets on all monomials of total degree <= `degree` in the current node
//! `W_{t_k}`. The normal equations are solved through a symmetric
//! eigendecomposition: eigenvalues below a relative noise floor are treated
//! as exact zeros (minimum-norm solution), which makes structurally
//! degenerate steps — above all `t_0`, where every node is the zero vector —
//! work without special-casing. Eigenvalues that survive the floor but leave
//! the system conditioned worse than `CONDITION_LIMIT` abort with an error
//! naming the step, instead of returning garbage coefficients.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Eigenvalues below `DROP_TOL_REL * lambda_max` are discarded as numerical
/// zeros. The value sits well above the eigensolver's noise floor
/// (~machine epsilon relative) and well below `1 / CONDITION_LIMIT`.
pub const DROP_TOL_REL: f64 = 1e-13;
/// Largest acceptable ratio of retained eigenvalues.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Total-degree polynomial feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegressionBasis {
    degree: usize,
}

impl RegressionBasis {
    pub fn new(degree: usize) -> Result<Self> {
        if degree > 12 {
            return Err(Error::Invalid(format!(
                "basis degree {degree} is unreasonably large (max 12)"
            )));
        }
        Ok(Self { degree })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of monomials of total degree <= `degree` in `dim` variables:
    /// `C(dim + degree, degree)`.
    pub fn feature_count(&self, dim: usize) -> usize {
        let mut count: usize = 1;
        for i in 1..=self.degree {
            count = count * (dim + i) / i; // binomial recurrence, exact
        }
        count
    }

    /// Exponent rows in graded lexicographic order (degree first, then the
    /// leading variable). Row `f * dim + j` is the exponent of `w_j` in
    /// feature `f`; the first feature is the constant.
    pub fn exponents(&self, dim: usize) -> Vec<usize> {
        fn fill(row: &mut Vec<usize>, slot: usize, left: usize, out: &mut Vec<usize>) {
            if slot + 1 == row.len() {
                row[slot] = left;
                out.extend_from_slice(row);
                return;
            }
            for e in (0..=left).rev() {
                row[slot] = e;
                fill(row, slot + 1, left - e, out);
            }
        }
        let mut out = Vec::with_capacity(self.feature_count(dim) * dim);
        let mut row = vec![0usize; dim];
        for total in 0..=self.degree {
            fill(&mut row, 0, total, &mut out);
        }
        out
    }

    pub fn evaluator(&self, dim: usize) -> BasisEval {
        BasisEval {
            dim,
            exponents: self.exponents(dim),
            powers: vec![0.0; dim * (self.degree + 1)],
            degree: self.degree,
        }
    }
}

/// Reusable feature evaluator for one noise dimension. Cheap to clone, so
/// parallel chunks each keep their own (the scratch buffer is per-instance).
#[derive(Clone, Debug)]
pub struct BasisEval {
    dim: usize,
    degree: usize,
    exponents: Vec<usize>,
    powers: Vec<f64>, // dim * (degree + 1) scratch of w_j^e
}

impl BasisEval {
    pub fn n_features(&self) -> usize {
        self.exponents.len() / self.dim
    }

    /// Writes the feature row for node `w` into `out` (length `n_features`).
    pub fn eval_into(&mut self, w: &[f64], out: &mut [f64]) {
        debug_assert_eq!(w.len(), self.dim);
        debug_assert_eq!(out.len(), self.n_features());
        let cols = self.degree + 1;
        for (j, &wj) in w.iter().enumerate() {
            let p = &mut self.powers[j * cols..(j + 1) * cols];
            p[0] = 1.0;
            for e in 1..cols {
                p[e] = p[e - 1] * wj;
            }
        }
        for (f, slot) in out.iter_mut().enumerate() {
            let exps = &self.exponents[f * self.dim..(f + 1) * self.dim];
            let mut v = 1.0;
            for (j, &e) in exps.iter().enumerate() {
                if e > 0 {
                    v *= self.powers[j * cols + e];
                }
            }
            *slot = v;
        }
    }
}

/// Minimum-norm solution of `gram * coeffs = rhs` plus the condition
/// estimate of the retained spectrum.
#[derive(Debug)]
pub struct SolvedRegression {
    /// `n_features x n_targets` coefficient matrix.
    pub coeffs: DMatrix<f64>,
    /// Ratio of the largest to the smallest retained eigenvalue.
    pub condition: f64,
}

/// Solves the normal equations `gram * c = rhs` for a symmetric positive
/// semidefinite `gram`. `step` only labels the error on failure.
pub fn solve_normal_equations(
    gram: DMatrix<f64>,
    rhs: DMatrix<f64>,
    step: usize,
) -> Result<SolvedRegression> {
    let p = gram.nrows();
    debug_assert_eq!(gram.ncols(), p);
    debug_assert_eq!(rhs.nrows(), p);
    if gram.iter().any(|v| !v.is_finite()) || rhs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "regression system at step {step}"
        )));
    }
    let n_targets = rhs.ncols();
    let eig = gram.symmetric_eigen();
    let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if lambda_max <= 0.0 {
        // All features vanish on every path; the zero fit is the
        // minimum-norm answer.
        return Ok(SolvedRegression {
            coeffs: DMatrix::zeros(p, n_targets),
            condition: 1.0,
        });
    }
    let floor = DROP_TOL_REL * lambda_max;
    let mut lambda_min = lambda_max;
    let mut inv = Vec::with_capacity(p);
    for &l in eig.eigenvalues.iter() {
        if l >= floor {
            lambda_min = lambda_min.min(l);
            inv.push(1.0 / l);
        } else {
            inv.push(0.0);
        }
    }
    let condition = lambda_max / lambda_min;
    if condition > CONDITION_LIMIT {
        return Err(Error::RankDeficient {
            step,
            condition,
            limit: CONDITION_LIMIT,
        });
    }
    // coeffs = V diag(inv) V^T rhs
    let vt_rhs = eig.eigenvectors.transpose() * rhs;
    let mut scaled = vt_rhs;
    for (i, &w) in inv.iter().enumerate() {
        for c in 0..n_targets {
            scaled[(i, c)] *= w;
        }
    }
    let coeffs = &eig.eigenvectors * scaled;
    Ok(SolvedRegression { coeffs, condition })
}
