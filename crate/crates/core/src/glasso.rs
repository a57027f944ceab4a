//! Graphical lasso with an unpenalised diagonal:
//!
//! `min_{Ω ≻ 0} tr(SΩ) − log det Ω + λ Σ_{i≠j} |ω_ij|`.
//!
//! Block coordinate descent on the covariance `W`: each column is a lasso
//! problem in `W₁₁` solved by cyclic coordinate descent with an active set.
//! Entries that soft-thresholding sends to zero stay exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlassoSettings {
    pub lambda: f64,
    pub max_sweeps: usize,
    /// Bound on the KKT residual at which the solve stops.
    pub dual_gap_tol: f64,
    /// Stopping threshold on coefficient changes inside each lasso.
    pub inner_cd_tol: f64,
}

impl Default for GlassoSettings {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            max_sweeps: 200,
            dual_gap_tol: 1e-6,
            inner_cd_tol: 1e-8,
        }
    }
}

impl GlassoSettings {
    pub fn with_lambda(self, lambda: f64) -> Self {
        Self { lambda, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.dual_gap_tol > 0.0) || !(self.inner_cd_tol > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        if self.max_sweeps == 0 {
            return Err(Error::InvalidArgument(
                "max_sweeps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GlassoSolution {
    pub omega: Matrix,
    pub w: Matrix,
    /// Largest KKT violation at `(Ω, Ω⁻¹)`.
    pub gap: f64,
    pub converged: bool,
    pub sweeps: usize,
}

/// `tr(SΩ) − log det Ω + λ |Ω⁻|₁`.
pub fn glasso_objective(s: &Matrix, omega: &Matrix, lambda: f64) -> Result<f64> {
    let logdet = linalg::logdet_spd(omega, "glasso iterate")?;
    Ok(linalg::trace_of_product(s, omega) - logdet + lambda * linalg::offdiag_l1(omega))
}

/// Largest violation of the stationarity conditions
/// `s_ij − w_ij + λ sign(ω_ij) = 0` (nonzero `ω_ij`),
/// `|s_ij − w_ij| ≤ λ` (zero `ω_ij`) and `s_ii = w_ii`.
pub fn kkt_residual(s: &Matrix, w: &Matrix, omega: &Matrix, lambda: f64) -> f64 {
    let p = s.nrows();
    let mut worst = 0.0f64;
    for j in 0..p {
        for i in 0..p {
            let d = s[(i, j)] - w[(i, j)];
            let r = if i == j {
                d.abs()
            } else if omega[(i, j)] == 0.0 {
                (d.abs() - lambda).max(0.0)
            } else {
                (d + lambda * omega[(i, j)].signum()).abs()
            };
            worst = worst.max(r);
        }
    }
    worst
}

fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

/// Solves the penalised subproblem for a symmetric `S` with a strictly
/// positive diagonal. A solve that exhausts `max_sweeps` returns its last
/// iterate with `converged = false`.
pub fn glasso_solve(
    s: &Matrix,
    settings: &GlassoSettings,
    warm_start: Option<&Matrix>,
) -> Result<GlassoSolution> {
    settings.validate()?;
    let p = linalg::require_square(s, "S")?;
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("S has non-finite entries".into()));
    }
    linalg::require_symmetric(s, 1e-10, "S")?;
    if let Some(i) = (0..p).find(|&i| !(s[(i, i)] > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "diagonal of S must be strictly positive (s_{i}{i} = {})",
            s[(i, i)]
        )));
    }
    let lambda = settings.lambda;

    // Column-major p×p buffers; column j holds the regression of j on the rest.
    let mut w = vec![0.0; p * p];
    let mut beta = vec![0.0; p * p];
    for i in 0..p {
        w[i * p + i] = s[(i, i)];
    }
    if let Some(warm) = warm_start {
        if warm.nrows() != p || warm.ncols() != p {
            return Err(Error::Dimension("warm start must be p×p".into()));
        }
        init_from_warm_start(s, warm, &mut w, &mut beta)?;
    }

    let s_col = |j: usize, i: usize| s[(i, j)];
    let mut r = vec![0.0; p];
    let mut active: Vec<usize> = Vec::with_capacity(p);
    let mut sweeps = 0;
    let mut gap = f64::INFINITY;
    let mut omega = Matrix::zeros(p, p);
    let mut exact_w: Option<Matrix> = None;

    // Early sweeps need only rough column solves, so the lasso tolerance
    // follows the outer residual down to `inner_cd_tol`.
    let scale = s.amax();
    let mut inner_tol = (1e-4 * scale).max(settings.inner_cd_tol);
    while sweeps < settings.max_sweeps {
        sweeps += 1;
        for j in 0..p {
            let bj = j * p;
            // r = W₁₁ β over rows ≠ j.
            r.iter_mut().for_each(|v| *v = 0.0);
            for l in 0..p {
                let b = beta[bj + l];
                if l != j && b != 0.0 {
                    let wl = &w[l * p..(l + 1) * p];
                    for (ri, wi) in r.iter_mut().zip(wl) {
                        *ri += b * wi;
                    }
                }
            }
            lasso_column(
                p,
                j,
                lambda,
                inner_tol,
                &w,
                &mut beta[bj..bj + p],
                &mut r,
                &mut active,
                |i| s_col(j, i),
            );
            for i in 0..p {
                if i != j {
                    w[bj + i] = r[i];
                    w[i * p + j] = r[i];
                }
            }
        }

        // The sweep leaves W and the β columns slightly out of step, so the
        // residual is measured at the assembled Ω and its exact inverse.
        // The residual against the running W is free; the exact inverse is
        // only formed once it passes.
        omega = assemble_omega(p, &w, &beta);
        let wm = Matrix::from_column_slice(p, p, &w);
        gap = kkt_residual(s, &wm, &omega, lambda);
        inner_tol = (1e-3 * gap).min(inner_tol).max(settings.inner_cd_tol);
        if gap <= settings.dual_gap_tol {
            match linalg::inverse_spd(&omega, "glasso iterate") {
                Ok(sigma) => {
                    gap = kkt_residual(s, &sigma, &omega, lambda);
                    exact_w = Some(sigma);
                }
                Err(_) => gap = f64::INFINITY,
            }
        }
        if gap <= settings.dual_gap_tol {
            break;
        }
    }

    let converged = gap <= settings.dual_gap_tol;
    if linalg::cholesky(&omega, "glasso solution").is_err() {
        // A truncated solve can leave the assembled Ω indefinite while W,
        // kept positive definite by the block updates, is still usable.
        omega = linalg::inverse_spd(&Matrix::from_column_slice(p, p, &w), "glasso solution")?;
    }
    let w = match exact_w {
        Some(sigma) if converged => sigma,
        _ => Matrix::from_column_slice(p, p, &w),
    };
    Ok(GlassoSolution {
        omega,
        w,
        gap,
        converged,
        sweeps,
    })
}

fn init_from_warm_start(s: &Matrix, warm: &Matrix, w: &mut [f64], beta: &mut [f64]) -> Result<()> {
    let p = s.nrows();
    let sym = linalg::symmetrized(warm);
    let w0 = linalg::inverse_spd(&sym, "warm start")?;
    // Congruence scaling D W D keeps W positive definite while pinning its
    // diagonal to diag(S).
    let d: Vec<f64> = (0..p).map(|i| (s[(i, i)] / w0[(i, i)]).sqrt()).collect();
    for j in 0..p {
        for i in 0..p {
            w[j * p + i] = if i == j {
                s[(i, i)]
            } else {
                d[i] * w0[(i, j)] * d[j]
            };
        }
    }
    for j in 0..p {
        let ojj = sym[(j, j)];
        for i in 0..p {
            beta[j * p + i] = if i == j {
                0.0
            } else {
                -sym[(i, j)] / ojj * d[j] / d[i]
            };
        }
    }
    Ok(())
}

/// Coordinate descent for `min ½βᵀW₁₁β − s₁₂ᵀβ + λ|β|₁` with `r = W₁₁β`
/// maintained incrementally. Alternates full passes with passes over the
/// current active set.
#[allow(clippy::too_many_arguments)]
fn lasso_column(
    p: usize,
    j: usize,
    lambda: f64,
    tol: f64,
    w: &[f64],
    beta: &mut [f64],
    r: &mut [f64],
    active: &mut Vec<usize>,
    s_j: impl Fn(usize) -> f64,
) {
    const MAX_PASSES: usize = 10_000;
    let update = |k: usize, beta: &mut [f64], r: &mut [f64]| -> f64 {
        let wkk = w[k * p + k];
        let old = beta[k];
        let z = s_j(k) - (r[k] - wkk * old);
        let new = soft_threshold(z, lambda) / wkk;
        if new != old {
            let delta = new - old;
            beta[k] = new;
            let wk = &w[k * p..(k + 1) * p];
            for (ri, wi) in r.iter_mut().zip(wk) {
                *ri += delta * wi;
            }
            delta.abs()
        } else {
            0.0
        }
    };

    for _ in 0..MAX_PASSES {
        let mut max_delta = 0.0f64;
        active.clear();
        for k in 0..p {
            if k == j {
                continue;
            }
            max_delta = max_delta.max(update(k, beta, r));
            if beta[k] != 0.0 {
                active.push(k);
            }
        }
        if max_delta < tol {
            return;
        }
        for _ in 0..MAX_PASSES {
            let mut inner = 0.0f64;
            for &k in active.iter() {
                inner = inner.max(update(k, beta, r));
            }
            if inner < tol {
                break;
            }
        }
    }
}

/// `ω_jj = 1 / (w_jj − w₁₂ᵀβ)`, `ω₁₂ = −β ω_jj`, symmetrised by averaging.
fn assemble_omega(p: usize, w: &[f64], beta: &[f64]) -> Matrix {
    let mut omega = Matrix::zeros(p, p);
    for j in 0..p {
        let bj = &beta[j * p..(j + 1) * p];
        let wj = &w[j * p..(j + 1) * p];
        let mut dot = 0.0;
        for i in 0..p {
            if i != j {
                dot += wj[i] * bj[i];
            }
        }
        let ojj = 1.0 / (wj[j] - dot);
        omega[(j, j)] = ojj;
        for i in 0..p {
            if i != j {
                omega[(i, j)] = if bj[i] == 0.0 { 0.0 } else { -bj[i] * ojj };
            }
        }
    }
    for j in 0..p {
        for i in (j + 1)..p {
            let v = 0.5 * (omega[(i, j)] + omega[(j, i)]);
            omega[(i, j)] = v;
            omega[(j, i)] = v;
        }
    }
    omega
}
