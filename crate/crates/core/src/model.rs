//! Data model shared by every estimator: panel data, the block sample
//! covariance, the stack of layer precision matrices and the joint
//! log-likelihood of the two-layer model `Y_k = X_k + α_k Z`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Tolerance on `‖Ω − Ωᵀ‖∞` accepted by [`PrecisionStack::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// `n` individuals observed on the same `p` variables in `K` categories.
///
/// Row `i` of `values` is `(y_{1,i}ᵀ, …, y_{K,i}ᵀ)`: category blocks are
/// contiguous runs of `p` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    values: Matrix,
    k_categories: usize,
    p: usize,
    centered: bool,
}

impl PanelDataset {
    /// Wraps a raw matrix. When `centered` is claimed the column sums are
    /// checked against `1e-10·n`.
    pub fn new(values: Matrix, k_categories: usize, p: usize, centered: bool) -> Result<Self> {
        validate_layout(&values, k_categories, p)?;
        let data = Self {
            values,
            k_categories,
            p,
            centered,
        };
        if centered && !data.columns_have_zero_mean() {
            return Err(Error::NotCentered);
        }
        Ok(data)
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn k_categories(&self) -> usize {
        self.k_categories
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    /// The `n × p` block of category `k` (zero-based).
    pub fn category(&self, k: usize) -> nalgebra::DMatrixView<'_, f64> {
        self.values.columns(k * self.p, self.p)
    }

    /// Copy of the rows listed in `rows`, re-centred.
    pub fn subset_rows(&self, rows: &[usize]) -> Result<PanelDataset> {
        let cols = self.values.ncols();
        let sub = DMatrix::from_fn(rows.len(), cols, |i, j| self.values[(rows[i], j)]);
        center_and_wrap(sub, self.k_categories, self.p)
    }

    fn columns_have_zero_mean(&self) -> bool {
        let n = self.n() as f64;
        let tol = 1e-10 * n.max(1.0);
        self.values.column_iter().all(|c| {
            let scale = c.amax().max(1.0);
            c.sum().abs() <= tol * scale
        })
    }
}

fn validate_layout(values: &Matrix, k_categories: usize, p: usize) -> Result<()> {
    if k_categories < 2 {
        return Err(Error::TooFewCategories(k_categories));
    }
    if p == 0 {
        return Err(Error::InvalidArgument("p must be at least 1".into()));
    }
    if values.ncols() != k_categories * p {
        return Err(Error::Dimension(format!(
            "expected K·p = {} columns, got {}",
            k_categories * p,
            values.ncols()
        )));
    }
    for j in 0..values.ncols() {
        for i in 0..values.nrows() {
            if !values[(i, j)].is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
        }
    }
    Ok(())
}

/// Removes column means and wraps the result as a centred [`PanelDataset`].
pub fn center_and_wrap(mut raw: Matrix, k_categories: usize, p: usize) -> Result<PanelDataset> {
    validate_layout(&raw, k_categories, p)?;
    if raw.nrows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 individuals, got {}",
            raw.nrows()
        )));
    }
    let n = raw.nrows() as f64;
    for mut col in raw.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    Ok(PanelDataset {
        values: raw,
        k_categories,
        p,
        centered: true,
    })
}

/// The `Kp × Kp` sample covariance stored as `K × K` blocks of size `p × p`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCovariance {
    p: usize,
    k_categories: usize,
    blocks: Vec<Matrix>,
}

impl BlockCovariance {
    /// Builds from a row-major `K × K` family of blocks, checking global
    /// symmetry.
    pub fn from_blocks(k_categories: usize, blocks: Vec<Matrix>) -> Result<Self> {
        if k_categories < 2 {
            return Err(Error::TooFewCategories(k_categories));
        }
        if blocks.len() != k_categories * k_categories {
            return Err(Error::Dimension(format!(
                "expected {} blocks, got {}",
                k_categories * k_categories,
                blocks.len()
            )));
        }
        let p = blocks[0].nrows();
        for b in &blocks {
            if b.nrows() != p || b.ncols() != p {
                return Err(Error::Dimension("blocks must all be p×p".into()));
            }
        }
        let cov = Self {
            p,
            k_categories,
            blocks,
        };
        for l in 0..k_categories {
            for m in l..k_categories {
                let diff = (cov.block(l, m) - cov.block(m, l).transpose()).amax();
                let scale = cov.block(l, m).amax().max(1.0);
                if diff > 1e-10 * scale {
                    return Err(Error::NotSymmetric {
                        what: format!("block covariance ({l},{m})"),
                        asymmetry: diff,
                    });
                }
            }
        }
        Ok(cov)
    }

    /// Reassembles from a dense `Kp × Kp` matrix.
    pub fn from_dense(dense: &Matrix, k_categories: usize, p: usize) -> Result<Self> {
        if dense.nrows() != k_categories * p || dense.ncols() != k_categories * p {
            return Err(Error::Dimension("dense covariance must be Kp×Kp".into()));
        }
        let mut blocks = Vec::with_capacity(k_categories * k_categories);
        for l in 0..k_categories {
            for m in 0..k_categories {
                blocks.push(dense.view((l * p, m * p), (p, p)).into_owned());
            }
        }
        Self::from_blocks(k_categories, blocks)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k_categories(&self) -> usize {
        self.k_categories
    }

    /// `Σ̂_{Y(l,m)}` with zero-based category indices.
    pub fn block(&self, l: usize, m: usize) -> &Matrix {
        &self.blocks[l * self.k_categories + m]
    }

    /// Dense `Kp × Kp` matrix; only used by oracles and small problems.
    pub fn to_dense(&self) -> Matrix {
        let (p, k) = (self.p, self.k_categories);
        let mut out = Matrix::zeros(k * p, k * p);
        for l in 0..k {
            for m in 0..k {
                out.view_mut((l * p, m * p), (p, p))
                    .copy_from(self.block(l, m));
            }
        }
        out
    }
}

/// `Σ̂_{Y(l,m)} = n⁻¹ Σ_i y_{l,i} y_{m,i}ᵀ`, computed block by block.
pub fn block_covariance(data: &PanelDataset) -> Result<BlockCovariance> {
    if !data.is_centered() {
        return Err(Error::NotCentered);
    }
    let (k, p) = (data.k_categories(), data.p());
    let inv_n = 1.0 / data.n() as f64;
    let mut blocks = vec![Matrix::zeros(p, p); k * k];
    for l in 0..k {
        let yl = data.category(l);
        for m in l..k {
            let ym = data.category(m);
            let mut b = yl.tr_mul(&ym) * inv_n;
            if l == m {
                linalg::symmetrize_in_place(&mut b);
            } else {
                blocks[m * k + l] = b.transpose();
            }
            blocks[l * k + m] = b;
        }
    }
    Ok(BlockCovariance {
        p,
        k_categories: k,
        blocks,
    })
}

/// Regularisation levels: `lambda1` for the category layers, `lambda2`
/// for the systemic layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyPair {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl PenaltyPair {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(Self { lambda1, lambda2 })
    }

    pub fn equal(lambda: f64) -> Result<Self> {
        Self::new(lambda, lambda)
    }

    /// Penalty level applied to layer `k` (0 is systemic).
    pub fn for_layer(&self, k: usize) -> f64 {
        if k == 0 {
            self.lambda2
        } else {
            self.lambda1
        }
    }
}

/// The `K + 1` layer precisions `Ω₀ (systemic), Ω₁, …, Ω_K` and optional
/// systemic intensities `α_1..α_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionStack {
    omegas: Vec<Matrix>,
    alphas: Option<Vec<f64>>,
}

impl PrecisionStack {
    /// Validates symmetry, positive definiteness of every layer and of
    /// `A = Ω₀ + Σ α_k² Ω_k`.
    pub fn new(omegas: Vec<Matrix>, alphas: Option<Vec<f64>>) -> Result<Self> {
        let stack = Self::new_unchecked(omegas, alphas)?;
        for (k, om) in stack.omegas.iter().enumerate() {
            let asym = linalg::asymmetry(om);
            if asym > SYMMETRY_TOL * om.amax().max(1.0) {
                return Err(Error::NotSymmetric {
                    what: format!("layer {k}"),
                    asymmetry: asym,
                });
            }
            linalg::cholesky(om, &format!("layer {k}"))?;
        }
        linalg::cholesky(&stack.a_matrix(), "A = Ω₀ + Σ α_k² Ω_k")?;
        Ok(stack)
    }

    /// Shape checks only.
    pub(crate) fn new_unchecked(omegas: Vec<Matrix>, alphas: Option<Vec<f64>>) -> Result<Self> {
        if omegas.len() < 3 {
            return Err(Error::TooFewCategories(omegas.len().saturating_sub(1)));
        }
        let p = omegas[0].nrows();
        if p == 0 {
            return Err(Error::InvalidArgument("p must be at least 1".into()));
        }
        for om in &omegas {
            if om.nrows() != p || om.ncols() != p {
                return Err(Error::Dimension("all layers must be p×p".into()));
            }
        }
        if let Some(a) = &alphas {
            if a.len() != omegas.len() - 1 {
                return Err(Error::Dimension(format!(
                    "expected {} alphas, got {}",
                    omegas.len() - 1,
                    a.len()
                )));
            }
            if a.iter().any(|v| !v.is_finite() || *v <= 0.0) {
                return Err(Error::InvalidArgument("alphas must be positive".into()));
            }
        }
        Ok(Self { omegas, alphas })
    }

    pub fn identity(k_categories: usize, p: usize) -> Self {
        Self {
            omegas: vec![Matrix::identity(p, p); k_categories + 1],
            alphas: None,
        }
    }

    pub fn p(&self) -> usize {
        self.omegas[0].nrows()
    }

    pub fn k_categories(&self) -> usize {
        self.omegas.len() - 1
    }

    pub fn omegas(&self) -> &[Matrix] {
        &self.omegas
    }

    pub fn omega(&self, k: usize) -> &Matrix {
        &self.omegas[k]
    }

    pub fn into_omegas(self) -> Vec<Matrix> {
        self.omegas
    }

    pub fn has_alphas(&self) -> bool {
        self.alphas.is_some()
    }

    pub fn alphas_raw(&self) -> Option<&[f64]> {
        self.alphas.as_deref()
    }

    /// `α_k` for category `k ≥ 1`; one when unset.
    pub fn alpha(&self, k: usize) -> f64 {
        match &self.alphas {
            Some(a) => a[k - 1],
            None => 1.0,
        }
    }

    pub fn alphas(&self) -> Vec<f64> {
        (1..=self.k_categories()).map(|k| self.alpha(k)).collect()
    }

    /// `A = Ω₀ + Σ_k α_k² Ω_k`.
    pub fn a_matrix(&self) -> Matrix {
        let mut a = self.omegas[0].clone();
        for k in 1..self.omegas.len() {
            let w = self.alpha(k).powi(2);
            a.zip_apply(&self.omegas[k], |x, y| *x += w * y);
        }
        a
    }

    /// Total nonzero off-diagonal entries over all layers, both triangles.
    pub fn edge_count(&self) -> usize {
        2 * self.support_pairs()
    }

    /// Unordered nonzero off-diagonal pairs summed over layers.
    pub fn support_pairs(&self) -> usize {
        self.omegas.iter().map(linalg::offdiag_support_pairs).sum()
    }
}

/// Output of a single estimator run.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub estimate: PrecisionStack,
    /// Penalised log-likelihood after each M-step (one entry for one-step).
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time_seconds: f64,
    /// Nonzero off-diagonal entries over all layers, counting `(i,j)` and
    /// `(j,i)` separately.
    pub edge_count: usize,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

/// Per-stack quantities reused by likelihood and E-step evaluations.
pub(crate) struct StackFactors {
    pub logdets: Vec<f64>,
    pub a_inv: Matrix,
    pub logdet_a: f64,
}

impl StackFactors {
    pub fn new(stack: &PrecisionStack) -> Result<Self> {
        let logdets = stack
            .omegas
            .iter()
            .enumerate()
            .map(|(k, om)| linalg::logdet_spd(om, &format!("layer {k}")))
            .collect::<Result<Vec<_>>>()?;
        let a_chol = linalg::cholesky(&stack.a_matrix(), "A = Ω₀ + Σ α_k² Ω_k")?;
        let logdet_a = linalg::chol_logdet(&a_chol);
        let mut a_inv = a_chol.inverse();
        linalg::symmetrize_in_place(&mut a_inv);
        Ok(Self {
            logdets,
            a_inv,
            logdet_a,
        })
    }
}

/// `Σ_m α_m Σ̂_{Y(l,m)} Ω_m` for every `l` (zero-based category index).
pub(crate) fn weighted_cross_products(
    cov: &BlockCovariance,
    stack: &PrecisionStack,
) -> Vec<Matrix> {
    let k = cov.k_categories();
    let p = cov.p();
    (0..k)
        .map(|l| {
            let mut acc = Matrix::zeros(p, p);
            for m in 0..k {
                acc.gemm(stack.alpha(m + 1), cov.block(l, m), stack.omega(m + 1), 1.0);
            }
            acc
        })
        .collect()
}

/// `G = Σ_{l,m} α_l α_m Ω_l Σ̂_{Y(l,m)} Ω_m`, given the output of
/// [`weighted_cross_products`].
pub(crate) fn quadratic_moment(stack: &PrecisionStack, cross: &[Matrix]) -> Matrix {
    let p = stack.p();
    let mut g = Matrix::zeros(p, p);
    for (l, t) in cross.iter().enumerate() {
        g.gemm(stack.alpha(l + 1), stack.omega(l + 1), t, 1.0);
    }
    linalg::symmetrize_in_place(&mut g);
    g
}

fn check_compatible(cov: &BlockCovariance, stack: &PrecisionStack) -> Result<()> {
    if cov.p() != stack.p() || cov.k_categories() != stack.k_categories() {
        return Err(Error::Dimension(format!(
            "covariance is K={} p={}, stack is K={} p={}",
            cov.k_categories(),
            cov.p(),
            stack.k_categories(),
            stack.p()
        )));
    }
    Ok(())
}

/// Gaussian log-likelihood of the panel under the stack, evaluated through
/// the `K + 1` layer factorisations (never the `Kp × Kp` precision):
///
/// `ℒ = −(npK/2) log 2π + (n/2){Σ_k log det Ω_k − log det A − Σ_k tr(Σ̂_kk Ω_k)
///      + tr(G A⁻¹)}`.
pub fn joint_log_likelihood(
    cov: &BlockCovariance,
    stack: &PrecisionStack,
    n: usize,
) -> Result<f64> {
    check_compatible(cov, stack)?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    let factors = StackFactors::new(stack)?;
    Ok(log_likelihood_with(cov, stack, n, &factors))
}

pub(crate) fn log_likelihood_with(
    cov: &BlockCovariance,
    stack: &PrecisionStack,
    n: usize,
    factors: &StackFactors,
) -> f64 {
    let (k, p) = (cov.k_categories(), cov.p());
    let cross = weighted_cross_products(cov, stack);
    let g = quadratic_moment(stack, &cross);
    let mut inner = factors.logdets.iter().sum::<f64>() - factors.logdet_a;
    for c in 0..k {
        inner -= linalg::trace_of_product(cov.block(c, c), stack.omega(c + 1));
    }
    inner += linalg::trace_of_product(&g, &factors.a_inv);
    let nf = n as f64;
    -(nf * (p * k) as f64 / 2.0) * (2.0 * PI).ln() + nf / 2.0 * inner
}

/// Penalised objective maximised by both estimators:
/// `ℒ − (n/2)(λ₁ Σ_{k≥1} |Ω_k⁻|₁ + λ₂ |Ω₀⁻|₁)`.
///
/// The `n/2` factor puts the penalty on the same per-observation scale as the
/// graphical-lasso subproblems, so a glasso level `λ` is the level used here.
pub fn penalized_objective(
    cov: &BlockCovariance,
    stack: &PrecisionStack,
    n: usize,
    penalties: PenaltyPair,
) -> Result<f64> {
    let ll = joint_log_likelihood(cov, stack, n)?;
    Ok(ll - penalty_term(stack, n, penalties))
}

pub(crate) fn penalty_term(stack: &PrecisionStack, n: usize, penalties: PenaltyPair) -> f64 {
    let pen: f64 = stack
        .omegas()
        .iter()
        .enumerate()
        .map(|(k, om)| penalties.for_layer(k) * linalg::offdiag_l1(om))
        .sum();
    n as f64 / 2.0 * pen
}

/// Dense `Kp × Kp` precision `Ω_Y = {_d Ω_k} − {α_l α_m Ω_l A⁻¹ Ω_m}`.
pub fn dense_precision(stack: &PrecisionStack) -> Result<Matrix> {
    let (k, p) = (stack.k_categories(), stack.p());
    let a_inv = linalg::inverse_spd(&stack.a_matrix(), "A = Ω₀ + Σ α_k² Ω_k")?;
    let left: Vec<Matrix> = (1..=k)
        .map(|l| stack.omega(l) * &a_inv * stack.alpha(l))
        .collect();
    let mut out = Matrix::zeros(k * p, k * p);
    for l in 0..k {
        for m in 0..k {
            let mut block = -(&left[l] * stack.omega(m + 1)) * stack.alpha(m + 1);
            if l == m {
                block += stack.omega(l + 1);
            }
            out.view_mut((l * p, m * p), (p, p)).copy_from(&block);
        }
    }
    linalg::symmetrize_in_place(&mut out);
    Ok(out)
}

/// `|(Σ_k log det Ω_k − log det A) − log det Ω_Y|` where the right-hand side
/// factorises the explicitly assembled `Kp × Kp` precision. A self-test of
/// the factorised likelihood.
pub fn logdet_identity_check(stack: &PrecisionStack) -> Result<f64> {
    if stack
        .alphas_raw()
        .is_some_and(|a| a.iter().any(|v| *v != 1.0))
    {
        return Err(Error::InvalidArgument(
            "identity check is defined for unit alphas".into(),
        ));
    }
    let factors = StackFactors::new(stack)?;
    let factored = factors.logdets.iter().sum::<f64>() - factors.logdet_a;
    let dense = linalg::logdet_spd(&dense_precision(stack)?, "assembled Ω_Y")?;
    Ok((factored - dense).abs())
}

/// Implied precision of the observed `Y_k`: `(Ω_k⁻¹ + α_k² Ω₀⁻¹)⁻¹`.
pub fn aggregate_precision(stack: &PrecisionStack, k: usize) -> Result<Matrix> {
    let kc = stack.k_categories();
    if k == 0 || k > kc {
        return Err(Error::IndexOutOfRange { index: k, max: kc });
    }
    let sigma_k = linalg::inverse_spd(stack.omega(k), &format!("layer {k}"))?;
    let sigma_0 = linalg::inverse_spd(stack.omega(0), "layer 0")?;
    let total = sigma_k + sigma_0 * stack.alpha(k).powi(2);
    linalg::inverse_spd(&total, "aggregate covariance")
}
