//! One-step estimator: moment estimates of the layer covariances, a
//! positive-semidefinite projection, then one graphical-lasso solve per layer.

use std::time::Instant;

use nalgebra::SymmetricEigen;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::glasso::{glasso_solve, GlassoSettings};
use crate::linalg::{self, Matrix};
use crate::model::{
    block_covariance, penalized_objective, BlockCovariance, FitReport, PanelDataset, PenaltyPair,
    PrecisionStack,
};

/// Relative floor applied to the diagonal after projection.
pub const DIAGONAL_FLOOR: f64 = 1e-8;

/// Average of the `K(K−1)` ordered cross blocks, an estimate of `Σ₀`.
pub fn sigma0_moment(cov: &BlockCovariance) -> Result<Matrix> {
    let k = cov.k_categories();
    if k < 2 {
        return Err(Error::TooFewCategories(k));
    }
    let p = cov.p();
    let mut acc = Matrix::zeros(p, p);
    for l in 0..k {
        for m in 0..k {
            if l != m {
                acc += cov.block(m, l);
            }
        }
    }
    acc /= (k * (k - 1)) as f64;
    linalg::symmetrize_in_place(&mut acc);
    Ok(acc)
}

/// `Σ̂_{Y(k,k)} − Σ̂₀` for category `k` in `1..=K`. May be indefinite.
pub fn sigmak_moment(cov: &BlockCovariance, sigma0: &Matrix, k: usize) -> Result<Matrix> {
    let kc = cov.k_categories();
    if k == 0 || k > kc {
        return Err(Error::IndexOutOfRange { index: k, max: kc });
    }
    if sigma0.nrows() != cov.p() || sigma0.ncols() != cov.p() {
        return Err(Error::Dimension("sigma0 must be p×p".into()));
    }
    let mut out = cov.block(k - 1, k - 1) - sigma0;
    linalg::symmetrize_in_place(&mut out);
    Ok(out)
}

/// Frobenius projection onto the PSD cone by eigenvalue clipping, followed
/// by a diagonal floor of `max(1e-8 · max_i M_ii, 1e-8)` so the result is a
/// valid graphical-lasso input.
pub fn psd_project(m: &Matrix) -> Result<Matrix> {
    linalg::require_symmetric(m, 1e-10, "matrix to project")?;
    let p = m.nrows();
    let max_diag = (0..p).map(|i| m[(i, i)]).fold(0.0f64, f64::max);
    let floor = (DIAGONAL_FLOOR * max_diag).max(DIAGONAL_FLOOR);

    let eig = SymmetricEigen::new(linalg::symmetrized(m));
    let out = if eig.eigenvalues.iter().all(|v| *v >= 0.0) {
        linalg::symmetrized(m)
    } else {
        let clipped = eig.eigenvalues.map(|v| v.max(0.0));
        let u = &eig.eigenvectors;
        let mut out = u * Matrix::from_diagonal(&clipped) * u.transpose();
        linalg::symmetrize_in_place(&mut out);
        out
    };
    let mut out = out;
    for i in 0..p {
        if out[(i, i)] < floor {
            out[(i, i)] = floor;
        }
    }
    Ok(out)
}

/// Projected moment estimates `Σ̂′₀, Σ̂′₁, …, Σ̂′_K`.
pub fn projected_moments(cov: &BlockCovariance) -> Result<Vec<Matrix>> {
    let sigma0 = sigma0_moment(cov)?;
    let mut out = Vec::with_capacity(cov.k_categories() + 1);
    out.push(psd_project(&sigma0)?);
    for k in 1..=cov.k_categories() {
        out.push(psd_project(&sigmak_moment(cov, &sigma0, k)?)?);
    }
    Ok(out)
}

/// Solves the `K + 1` independent layer problems for the given layer
/// covariances; layer 0 uses `λ₂`, the others `λ₁`.
pub(crate) fn solve_layers(
    layer_covs: &[Matrix],
    penalties: PenaltyPair,
    settings: &GlassoSettings,
    warm: Option<&PrecisionStack>,
) -> Result<(Vec<Matrix>, Vec<bool>)> {
    let solved: Vec<Result<(Matrix, bool)>> = layer_covs
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            let st = settings.with_lambda(penalties.for_layer(k));
            let sol = glasso_solve(s, &st, warm.map(|w| w.omega(k)))?;
            Ok((sol.omega, sol.converged))
        })
        .collect();
    let mut omegas = Vec::with_capacity(solved.len());
    let mut converged = Vec::with_capacity(solved.len());
    for r in solved {
        let (om, c) = r?;
        omegas.push(om);
        converged.push(c);
    }
    Ok((omegas, converged))
}

/// One-step fit from a block covariance. `warm` only seeds the glasso solves.
pub(crate) fn onestep_from_cov(
    cov: &BlockCovariance,
    n: usize,
    penalties: PenaltyPair,
    settings: &GlassoSettings,
    warm: Option<&PrecisionStack>,
) -> Result<FitReport> {
    let start = Instant::now();
    let layer_covs = projected_moments(cov)?;
    let (omegas, converged) = solve_layers(&layer_covs, penalties, settings, warm)?;
    let estimate = PrecisionStack::new(omegas, None)?;
    let objective = penalized_objective(cov, &estimate, n, penalties)?;
    let mut warnings = Vec::new();
    for (k, c) in converged.iter().enumerate() {
        if !c {
            warnings.push(format!("glasso for layer {k} hit the sweep limit"));
        }
    }
    Ok(FitReport {
        edge_count: estimate.edge_count(),
        estimate,
        objective_trace: vec![objective],
        iterations: 1,
        converged: converged.iter().all(|c| *c),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        warnings,
    })
}

pub fn onestep_fit(
    data: &PanelDataset,
    penalties: PenaltyPair,
    settings: &GlassoSettings,
) -> Result<FitReport> {
    let cov = block_covariance(data)?;
    onestep_from_cov(&cov, data.n(), penalties, settings, None)
}
