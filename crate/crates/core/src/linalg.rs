//! Small dense linear-algebra helpers over `nalgebra::DMatrix`.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Largest absolute entry of `m - mᵀ`.
pub fn asymmetry(m: &Matrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// `(m + mᵀ) / 2`, written back in place.
pub fn symmetrize_in_place(m: &mut Matrix) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn symmetrized(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    symmetrize_in_place(&mut out);
    out
}

pub fn require_square(m: &Matrix, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

pub fn require_symmetric(m: &Matrix, tol: f64, what: &str) -> Result<()> {
    require_square(m, what)?;
    let a = asymmetry(m);
    let scale = m.amax().max(1.0);
    if a > tol * scale {
        return Err(Error::NotSymmetric {
            what: what.to_string(),
            asymmetry: a,
        });
    }
    Ok(())
}

/// Cholesky factor of a symmetric positive-definite matrix; failure is the
/// positive-definiteness signal.
pub fn cholesky(m: &Matrix, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite(what.to_string()));
    }
    let chol =
        Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))?;
    if chol
        .l_dirty()
        .diagonal()
        .iter()
        .any(|d| !(*d > 0.0) || !d.is_finite())
    {
        return Err(Error::NotPositiveDefinite(what.to_string()));
    }
    Ok(chol)
}

pub fn chol_logdet(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
}

pub fn logdet_spd(m: &Matrix, what: &str) -> Result<f64> {
    Ok(chol_logdet(&cholesky(m, what)?))
}

/// Inverse of a symmetric positive-definite matrix, symmetrised.
pub fn inverse_spd(m: &Matrix, what: &str) -> Result<Matrix> {
    let mut inv = cholesky(m, what)?.inverse();
    symmetrize_in_place(&mut inv);
    Ok(inv)
}

pub fn min_eigenvalue(m: &Matrix) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_eigenvalue(m: &Matrix) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `tr(a b)` without forming the product.
pub fn trace_of_product(a: &Matrix, b: &Matrix) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Sum of absolute off-diagonal entries, both triangles.
pub fn offdiag_l1(m: &Matrix) -> f64 {
    let n = m.nrows();
    let mut acc = 0.0;
    for j in 0..n {
        for i in 0..n {
            if i != j {
                acc += m[(i, j)].abs();
            }
        }
    }
    acc
}

/// Number of unordered pairs `i < j` with a nonzero entry in either triangle.
pub fn offdiag_support_pairs(m: &Matrix) -> usize {
    let n = m.nrows();
    let mut count = 0;
    for j in 0..n {
        for i in 0..j {
            if m[(i, j)] != 0.0 || m[(j, i)] != 0.0 {
                count += 1;
            }
        }
    }
    count
}
