//! Small dense linear-algebra helpers shared by every module.
//!
//! Everything here works on `nalgebra` dynamic matrices; problem sizes in
//! this crate are at most a few dozen rows.

use nalgebra::{ComplexField, DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Relative floor for singular values counted toward the rank.
pub const RANK_REL_FLOOR: f64 = 1e-10;

const SCHUR_MAX_ITER: usize = 10_000;

/// Threshold below which a singular value is treated as zero.
pub fn rank_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    let dim = rows.max(cols) as f64;
    (dim * f64::EPSILON).max(RANK_REL_FLOOR) * sigma_max
}

/// Numerical rank from singular values.
pub fn numerical_rank<T>(m: &DMatrix<T>) -> usize
where
    T: ComplexField<RealField = f64>,
{
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    let tol = rank_tolerance(m.nrows(), m.ncols(), smax);
    sv.iter().filter(|&&s| s > tol).count()
}

/// Orthonormal basis (as columns) for the right nullspace of `m`, taken as the
/// right singular vectors of the `dim` smallest singular values.
///
/// The matrix is zero-padded to square first: the thin SVD of a wide matrix
/// does not return the full right singular basis.
pub fn null_basis(m: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    let size = rows.max(cols);
    let mut padded = DMatrix::zeros(size, cols);
    padded.rows_mut(0, rows).copy_from(m);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let mut basis = DMatrix::zeros(cols, dim);
    for (k, &idx) in order.iter().take(dim).enumerate() {
        let mut col = v_t.row(idx).transpose();
        // Fix the sign so that the first significant entry is positive.
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        basis.set_column(k, &col);
    }
    basis
}

/// Moore–Penrose pseudo-inverse with the crate's rank tolerance.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = rank_tolerance(rows, cols, smax).max(f64::MIN_POSITIVE);
    svd.pseudo_inverse(tol).expect("U and V were computed")
}

/// All eigenvalues of a real square matrix, with multiplicity.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    if !m.is_square() {
        return Err(Error::dim(format!(
            "eigenvalues of a non-square {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    let schur = m
        .clone()
        .try_schur(f64::EPSILON, SCHUR_MAX_ITER)
        .ok_or(Error::EigenNonConvergence(m.nrows()))?;
    Ok(schur.complex_eigenvalues().iter().cloned().collect())
}

/// Largest real part among the eigenvalues (the spectral abscissa).
pub fn spectral_abscissa(m: &DMatrix<f64>) -> Result<f64> {
    Ok(eigenvalues(m)?.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows() == 0 {
        return DVector::zeros(0);
    }
    let mut ev = SymmetricEigen::new(symmetrize(m)).eigenvalues;
    ev.as_mut_slice().sort_by(f64::total_cmp);
    ev
}

pub fn max_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= tol * (1.0 + m.amax())
}

/// Block-diagonal concatenation.
pub fn blkdiag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Assemble a matrix from a row-major grid of blocks. Every block in a grid
/// row must have the same height and every block in a grid column the same
/// width.
pub fn block(grid: &[&[&DMatrix<f64>]]) -> DMatrix<f64> {
    let heights: Vec<usize> = grid.iter().map(|row| row[0].nrows()).collect();
    let widths: Vec<usize> = grid[0].iter().map(|b| b.ncols()).collect();
    let mut out = DMatrix::zeros(heights.iter().sum(), widths.iter().sum());
    let mut r = 0;
    for (i, row) in grid.iter().enumerate() {
        let mut c = 0;
        for (j, b) in row.iter().enumerate() {
            debug_assert_eq!(b.shape(), (heights[i], widths[j]), "block ({i},{j})");
            out.view_mut((r, c), b.shape()).copy_from(*b);
            c += widths[j];
        }
        r += heights[i];
    }
    out
}

/// Horizontal concatenation `[a b]`.
pub fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Vertical concatenation `[a; b]`.
pub fn vcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.ncols(), b.ncols());
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

pub fn vcat_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(a.len() + b.len());
    out.rows_mut(0, a.len()).copy_from(a);
    out.rows_mut(a.len(), b.len()).copy_from(b);
    out
}

/// 2-norm condition number; infinite for singular matrices.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Largest sine of the principal angles between the column spans of two
/// orthonormal bases of equal dimension.
pub fn max_principal_sine(q1: &DMatrix<f64>, q2: &DMatrix<f64>) -> f64 {
    let residual = q2 - q1 * (q1.transpose() * q2);
    residual.singular_values().iter().cloned().fold(0.0, f64::max)
}
