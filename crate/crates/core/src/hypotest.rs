//! Resampling tests on the cross-category covariance blocks: a permutation
//! test for the absence of a systemic component and a parametric bootstrap
//! test for equality of all cross blocks.

use nalgebra::SymmetricEigen;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{center_and_wrap, PanelDataset};
use crate::rng::{stream, Purpose};

/// Minimum number of permutations for the `Σ₀ = 0` test.
pub const MIN_PERMUTATIONS: usize = 99;
/// Eigenvalues of the pooled null covariance below this fraction of the
/// largest are floored before sampling.
pub const EIGEN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockNorm {
    #[default]
    Frobenius,
    Max,
    L1,
}

impl BlockNorm {
    pub fn apply(&self, m: &Matrix) -> f64 {
        match self {
            BlockNorm::Frobenius => m.norm(),
            BlockNorm::Max => m.amax(),
            BlockNorm::L1 => m.iter().map(|v| v.abs()).sum(),
        }
    }
}

impl std::str::FromStr for BlockNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frobenius" | "fro" => Ok(BlockNorm::Frobenius),
            "max" => Ok(BlockNorm::Max),
            "l1" => Ok(BlockNorm::L1),
            other => Err(Error::InvalidArgument(format!("unknown norm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub p_value: f64,
    pub null_draws: Vec<f64>,
    pub warnings: Vec<String>,
}

fn p_value(observed: f64, null: &[f64]) -> f64 {
    let exceed = null.iter().filter(|v| **v >= observed).count();
    (1 + exceed) as f64 / (1 + null.len()) as f64
}

/// Symmetrised cross blocks `(Y_lᵀY_m + Y_mᵀY_l) / 2n` for `l < m`, with
/// rows of category `k` read through `perm[k]` when given.
fn sym_cross_blocks(data: &PanelDataset, perm: Option<&[Vec<usize>]>) -> Vec<Matrix> {
    let (n, k, p) = (data.n(), data.k_categories(), data.p());
    let cats: Vec<Matrix> = (0..k)
        .map(|c| {
            let block = data.category(c);
            match perm {
                None => block.into_owned(),
                Some(perms) => Matrix::from_fn(n, p, |i, j| block[(perms[c][i], j)]),
            }
        })
        .collect();
    let mut out = Vec::with_capacity(k * (k - 1) / 2);
    for l in 0..k {
        for m in l + 1..k {
            let c = cats[l].tr_mul(&cats[m]);
            let mut s = &c + c.transpose();
            s /= 2.0 * n as f64;
            out.push(s);
        }
    }
    out
}

/// `Σ_{l≠m} ‖C_lm‖`, each unordered pair counted twice.
fn sum_statistic(blocks: &[Matrix], norm: BlockNorm) -> f64 {
    2.0 * blocks.iter().map(|b| norm.apply(b)).sum::<f64>()
}

/// `Σ_{l≠m} ‖C_lm − C̄‖` with `C̄` the mean cross block.
fn spread_statistic(blocks: &[Matrix], norm: BlockNorm) -> f64 {
    let mut mean = Matrix::zeros(blocks[0].nrows(), blocks[0].ncols());
    for b in blocks {
        mean += b;
    }
    mean /= blocks.len() as f64;
    2.0 * blocks.iter().map(|b| norm.apply(&(b - &mean))).sum::<f64>()
}

fn require_centered_panel(data: &PanelDataset) -> Result<()> {
    if data.k_categories() < 2 {
        return Err(Error::TooFewCategories(data.k_categories()));
    }
    if !data.is_centered() {
        return Err(Error::NotCentered);
    }
    if data.n() < 3 {
        return Err(Error::InvalidArgument("need at least 3 individuals".into()));
    }
    Ok(())
}

/// Permutation test of `H₀: Σ₀ = 0`. Rows are permuted independently within
/// each category, which breaks cross-category dependence while keeping every
/// marginal block intact.
pub fn test_sigma0_zero(
    data: &PanelDataset,
    n_perm: usize,
    seed: u64,
    norm: BlockNorm,
) -> Result<TestOutcome> {
    require_centered_panel(data)?;
    if n_perm < MIN_PERMUTATIONS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_PERMUTATIONS} permutations, got {n_perm}"
        )));
    }
    let observed = sum_statistic(&sym_cross_blocks(data, None), norm);
    let (n, k) = (data.n(), data.k_categories());
    let null_draws: Vec<f64> = (0..n_perm)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(seed, Purpose::Resampling, b as u64);
            let perms: Vec<Vec<usize>> = (0..k)
                .map(|_| {
                    let mut idx: Vec<usize> = (0..n).collect();
                    idx.shuffle(&mut rng);
                    idx
                })
                .collect();
            sum_statistic(&sym_cross_blocks(data, Some(&perms)), norm)
        })
        .collect();
    Ok(TestOutcome {
        statistic: observed,
        p_value: p_value(observed, &null_draws),
        null_draws,
        warnings: Vec::new(),
    })
}

/// Parametric bootstrap test that all cross blocks share a common value.
/// Samples are drawn from the Gaussian whose diagonal blocks are the sample
/// blocks and whose cross blocks all equal the pooled mean.
pub fn test_equal_cross_blocks(
    data: &PanelDataset,
    n_boot: usize,
    seed: u64,
    norm: BlockNorm,
) -> Result<TestOutcome> {
    require_centered_panel(data)?;
    if n_boot == 0 {
        return Err(Error::InvalidArgument(
            "need at least one bootstrap draw".into(),
        ));
    }
    let (n, k, p) = (data.n(), data.k_categories(), data.p());
    let mut warnings = Vec::new();
    if k == 2 {
        warnings.push(
            "with K = 2 there is a single cross block and the hypothesis holds trivially".into(),
        );
    }
    let observed_blocks = sym_cross_blocks(data, None);
    let observed = spread_statistic(&observed_blocks, norm);

    let kp = k * p;
    let values = data.values();
    let mut null_cov = values.tr_mul(values) / n as f64;
    let mut pooled = Matrix::zeros(p, p);
    for b in &observed_blocks {
        pooled += b;
    }
    pooled /= observed_blocks.len() as f64;
    for l in 0..k {
        for m in 0..k {
            if l != m {
                null_cov.view_mut((l * p, m * p), (p, p)).copy_from(&pooled);
            }
        }
    }
    linalg::symmetrize_in_place(&mut null_cov);

    let eig = SymmetricEigen::new(null_cov);
    let top = eig.eigenvalues.max();
    if !(top > 0.0) {
        return Err(Error::NotPositiveDefinite(
            "pooled null covariance is zero".into(),
        ));
    }
    let floor = EIGEN_FLOOR * top;
    let floored = eig.eigenvalues.iter().filter(|v| **v < floor).count();
    if floored * 10 > kp {
        warnings.push(format!(
            "{floored} of {kp} eigenvalues of the null covariance were floored"
        ));
    }
    let roots = eig.eigenvalues.map(|v| v.max(floor).sqrt());
    let factor_t = (&eig.eigenvectors * Matrix::from_diagonal(&roots)).transpose();

    let null_draws: Vec<Result<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(seed, Purpose::Resampling, b as u64);
            let xi = Matrix::from_fn(n, kp, |_, _| StandardNormal.sample(&mut rng));
            let draw = center_and_wrap(xi * &factor_t, k, p)?;
            Ok(spread_statistic(&sym_cross_blocks(&draw, None), norm))
        })
        .collect();
    let null_draws = null_draws.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(TestOutcome {
        statistic: observed,
        p_value: p_value(observed, &null_draws),
        null_draws,
        warnings,
    })
}
