//! Tuning-parameter selection over a `(λ₁, λ₂)` grid by extended BIC or
//! `J`-fold cross-validation.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::em::{run_em, EmRun, EmSettings};
use crate::error::{Error, Result};
use crate::glasso::GlassoSettings;
use crate::linalg::{self, Matrix};
use crate::model::{
    block_covariance, dense_precision, joint_log_likelihood, BlockCovariance, FitReport,
    PanelDataset, PenaltyPair, PrecisionStack,
};
use crate::onestep::onestep_from_cov;
use crate::rng::{stream, Purpose};

/// Default eBIC strength.
pub const DEFAULT_GAMMA: f64 = 0.1;
/// Default number of cross-validation folds.
pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    Onestep,
    Em,
    AlphaEm,
}

impl std::fmt::Display for FitMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FitMethod::Onestep => "onestep",
            FitMethod::Em => "em",
            FitMethod::AlphaEm => "alpha-em",
        })
    }
}

impl std::str::FromStr for FitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "onestep" | "one-step" => Ok(FitMethod::Onestep),
            "em" => Ok(FitMethod::Em),
            "alpha-em" | "alpha_em" => Ok(FitMethod::AlphaEm),
            other => Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
        }
    }
}

/// Solver settings shared by every estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub glasso: GlassoSettings,
    pub delta: f64,
    pub max_iterations: usize,
}

impl FitSettings {
    pub fn new(p: usize) -> Self {
        let em = EmSettings::new(p);
        Self {
            glasso: em.glasso,
            delta: em.delta,
            max_iterations: em.max_iterations,
        }
    }

    pub fn em_settings(&self, estimate_alphas: bool) -> EmSettings {
        EmSettings {
            delta: self.delta,
            max_iterations: self.max_iterations,
            glasso: self.glasso,
            estimate_alphas,
        }
    }
}

/// Fits `method` to a block covariance; `warm` only seeds glasso solves.
pub fn fit_covariance(
    method: FitMethod,
    cov: &BlockCovariance,
    n: usize,
    penalties: PenaltyPair,
    settings: &FitSettings,
    warm: Option<&PrecisionStack>,
) -> Result<FitReport> {
    match method {
        FitMethod::Onestep => onestep_from_cov(cov, n, penalties, &settings.glasso, warm),
        FitMethod::Em | FitMethod::AlphaEm => {
            let em = settings.em_settings(method == FitMethod::AlphaEm);
            run_em(EmRun {
                cov,
                n,
                penalties,
                settings: &em,
                init: None,
                warm,
            })
        }
    }
}

pub fn fit(
    method: FitMethod,
    data: &PanelDataset,
    penalties: PenaltyPair,
    settings: &FitSettings,
) -> Result<FitReport> {
    let cov = block_covariance(data)?;
    fit_covariance(method, &cov, data.n(), penalties, settings, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub lambda1_values: Vec<f64>,
    pub lambda2_values: Vec<f64>,
    /// Constrain `λ₁ = λ₂`, walking `lambda1_values` only.
    pub tie_to_equal: bool,
}

fn check_increasing(values: &[f64], name: &str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(format!("{name} is empty")));
    }
    if values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "{name} must be strictly positive"
        )));
    }
    if values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(format!(
            "{name} must be strictly increasing"
        )));
    }
    Ok(())
}

/// `count` log-spaced values from `lo` to `hi`.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![(lo * hi).sqrt()];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

impl LambdaGrid {
    pub fn new(lambda1_values: Vec<f64>, lambda2_values: Vec<f64>) -> Result<Self> {
        check_increasing(&lambda1_values, "lambda1 grid")?;
        check_increasing(&lambda2_values, "lambda2 grid")?;
        Ok(Self {
            lambda1_values,
            lambda2_values,
            tie_to_equal: false,
        })
    }

    pub fn tied(values: Vec<f64>) -> Result<Self> {
        check_increasing(&values, "lambda grid")?;
        Ok(Self {
            lambda2_values: values.clone(),
            lambda1_values: values,
            tie_to_equal: true,
        })
    }

    /// Ten log-spaced values spanning one decade around `√(log p / n)`,
    /// used for both penalties.
    pub fn default_for(p: usize, n: usize) -> Self {
        let anchor = ((p.max(2) as f64).ln() / n.max(1) as f64).sqrt();
        let values = log_spaced(anchor / 10f64.sqrt(), anchor * 10f64.sqrt(), 10);
        Self {
            lambda1_values: values.clone(),
            lambda2_values: values,
            tie_to_equal: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_increasing(&self.lambda1_values, "lambda1 grid")?;
        if !self.tie_to_equal {
            check_increasing(&self.lambda2_values, "lambda2 grid")?;
        }
        Ok(())
    }

    /// Grid points in canonical order (λ₁ outer, λ₂ inner, both ascending).
    pub fn points(&self) -> Vec<PenaltyPair> {
        if self.tie_to_equal {
            self.lambda1_values
                .iter()
                .map(|&l| PenaltyPair {
                    lambda1: l,
                    lambda2: l,
                })
                .collect()
        } else {
            let mut out = Vec::with_capacity(self.lambda1_values.len() * self.lambda2_values.len());
            for &l1 in &self.lambda1_values {
                for &l2 in &self.lambda2_values {
                    out.push(PenaltyPair {
                        lambda1: l1,
                        lambda2: l2,
                    });
                }
            }
            out
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Criterion {
    Ebic { gamma: f64 },
    Cv { folds: usize, seed: u64 },
}

impl Criterion {
    pub fn label(&self) -> String {
        match self {
            Criterion::Ebic { gamma } => format!("ebic({gamma})"),
            Criterion::Cv { folds, .. } => format!("cv({folds})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub penalties: PenaltyPair,
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub chosen: PenaltyPair,
    /// One entry per grid point, in grid order.
    pub scores: Vec<GridScore>,
    pub criterion: Criterion,
    /// Full-data fit at the chosen point.
    pub chosen_fit: FitReport,
    /// Full-data fits in grid order, when retained (eBIC only).
    pub fits: Option<Vec<Option<FitReport>>>,
}

/// `log C(total, k)` through log-gamma.
pub fn ln_binomial(total: usize, k: usize) -> f64 {
    debug_assert!(k <= total);
    ln_gamma(total as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((total - k) as f64 + 1.0)
}

/// `−2ℒ + ν log n + 2γ log C(Kp(p−1)/2, ν)` with `ν` the number of nonzero
/// unordered off-diagonal pairs over all layers.
pub fn ebic_score(fit: &FitReport, cov: &BlockCovariance, n: usize, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    let ll = joint_log_likelihood(cov, &fit.estimate, n)?;
    if !ll.is_finite() {
        return Err(Error::InvalidArgument(
            "log-likelihood is not finite".into(),
        ));
    }
    let (k, p) = (cov.k_categories(), cov.p());
    let space = k * p * (p - 1) / 2;
    let nu = fit.estimate.support_pairs();
    if nu > space {
        return Err(Error::InvalidArgument(format!(
            "model size {nu} exceeds the model space Kp(p-1)/2 = {space}"
        )));
    }
    let complexity = if gamma == 0.0 {
        0.0
    } else {
        2.0 * gamma * ln_binomial(space, nu)
    };
    Ok(-2.0 * ll + nu as f64 * (n as f64).ln() + complexity)
}

/// `tr(ΣΩ) − log det Ω`.
pub fn predictive_nll(sigma: &Matrix, omega: &Matrix) -> Result<f64> {
    Ok(linalg::trace_of_product(sigma, omega) - linalg::logdet_spd(omega, "Ω_Y")?)
}

/// Splits `0..n` into `folds` near-equal groups after a seeded shuffle.
pub fn make_folds(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::InvalidArgument("need at least 2 folds".into()));
    }
    if n < 2 * folds {
        return Err(Error::InvalidArgument(format!(
            "n = {n} is too small for {folds} folds of at least 2 individuals"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Purpose::Folds, 0));
    let base = n / folds;
    let extra = n % folds;
    let mut out = Vec::with_capacity(folds);
    let mut start = 0;
    for j in 0..folds {
        let len = base + usize::from(j < extra);
        let mut fold = order[start..start + len].to_vec();
        fold.sort_unstable();
        out.push(fold);
        start += len;
    }
    Ok(out)
}

/// Training and held-out block covariances of one fold.
struct FoldData {
    train: BlockCovariance,
    train_n: usize,
    test_dense: Matrix,
}

fn prepare_folds(data: &PanelDataset, folds: &[Vec<usize>]) -> Result<Vec<FoldData>> {
    let n = data.n();
    let mut in_fold = vec![usize::MAX; n];
    for (j, fold) in folds.iter().enumerate() {
        for &i in fold {
            if i >= n || in_fold[i] != usize::MAX {
                return Err(Error::InvalidArgument(format!(
                    "fold assignment must partition 0..{n} (index {i})"
                )));
            }
            in_fold[i] = j;
        }
    }
    folds
        .iter()
        .enumerate()
        .map(|(j, fold)| {
            let wrap = |e: Error| Error::Fold {
                fold: j,
                source: Box::new(e),
            };
            if fold.len() < 2 {
                return Err(wrap(Error::InvalidArgument(
                    "fold has fewer than 2 individuals".into(),
                )));
            }
            let rest: Vec<usize> = (0..n).filter(|&i| in_fold[i] != j).collect();
            let train = data.subset_rows(&rest).map_err(wrap)?;
            let test = data.subset_rows(fold).map_err(wrap)?;
            Ok(FoldData {
                train: block_covariance(&train).map_err(wrap)?,
                train_n: train.n(),
                test_dense: block_covariance(&test).map_err(wrap)?.to_dense(),
            })
        })
        .collect()
}

fn fold_score(
    fold: &FoldData,
    method: FitMethod,
    penalties: PenaltyPair,
    settings: &FitSettings,
    warm: Option<&PrecisionStack>,
) -> Result<(f64, PrecisionStack)> {
    let fit = fit_covariance(method, &fold.train, fold.train_n, penalties, settings, warm)?;
    let omega_y = dense_precision(&fit.estimate)?;
    Ok((predictive_nll(&fold.test_dense, &omega_y)?, fit.estimate))
}

/// Sum over folds of the held-out predictive negative log-likelihood of the
/// model fitted on the remaining folds, for explicit fold assignments.
pub fn cv_score_with_folds(
    data: &PanelDataset,
    folds: &[Vec<usize>],
    penalties: PenaltyPair,
    method: FitMethod,
    settings: &FitSettings,
) -> Result<f64> {
    let prepared = prepare_folds(data, folds)?;
    let scores: Vec<Result<f64>> = prepared
        .par_iter()
        .enumerate()
        .map(|(j, f)| {
            fold_score(f, method, penalties, settings, None)
                .map(|(s, _)| s)
                .map_err(|e| Error::Fold {
                    fold: j,
                    source: Box::new(e),
                })
        })
        .collect();
    scores.into_iter().sum()
}

/// Cross-validation score with seeded fold assignment.
pub fn cv_score(
    data: &PanelDataset,
    penalties: PenaltyPair,
    folds: usize,
    method: FitMethod,
    settings: &FitSettings,
    seed: u64,
) -> Result<f64> {
    let assignment = make_folds(data.n(), folds, seed)?;
    cv_score_with_folds(data, &assignment, penalties, method, settings)
}

/// Indices of grid points from sparsest (largest `λ₁ + λ₂`) to densest, the
/// order in which fits are warm-started.
fn warm_start_order(points: &[PenaltyPair]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (points[a], points[b]);
        (pb.lambda1 + pb.lambda2)
            .total_cmp(&(pa.lambda1 + pa.lambda2))
            .then(pb.lambda1.total_cmp(&pa.lambda1))
            .then(a.cmp(&b))
    });
    order
}

/// Index of the minimum score; ties go to the larger `λ₁ + λ₂`.
fn argmin(points: &[PenaltyPair], scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        let Some(s) = s else { continue };
        best = match best {
            None => Some(i),
            Some(b) => {
                let sb = scores[b].unwrap();
                let (pi, pb) = (points[i], points[b]);
                if *s < sb || (*s == sb && pi.lambda1 + pi.lambda2 > pb.lambda1 + pb.lambda2) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// Evaluates every grid point under `criterion` and returns the minimiser.
pub fn select_lambda(
    data: &PanelDataset,
    grid: &LambdaGrid,
    criterion: Criterion,
    method: FitMethod,
    settings: &FitSettings,
    keep_fits: bool,
) -> Result<SelectionReport> {
    grid.validate()?;
    let cov = block_covariance(data)?;
    let n = data.n();
    let points = grid.points();
    let order = warm_start_order(&points);
    let mut scores: Vec<Option<f64>> = vec![None; points.len()];
    let mut errors: Vec<Option<String>> = vec![None; points.len()];

    let mut fits: Vec<Option<FitReport>> = vec![None; points.len()];
    match criterion {
        Criterion::Ebic { gamma } => {
            let mut warm: Option<PrecisionStack> = None;
            for &i in &order {
                let scored = fit_covariance(method, &cov, n, points[i], settings, warm.as_ref())
                    .and_then(|fit| ebic_score(&fit, &cov, n, gamma).map(|s| (s, fit)));
                match scored {
                    Ok((s, fit)) => {
                        scores[i] = Some(s);
                        warm = Some(fit.estimate.clone());
                        fits[i] = Some(fit);
                    }
                    Err(e) => errors[i] = Some(e.to_string()),
                }
            }
        }
        Criterion::Cv { folds, seed } => {
            let assignment = make_folds(n, folds, seed)?;
            let prepared = prepare_folds(data, &assignment)?;
            // Folds run concurrently; each walks the grid with its own warm starts.
            let per_fold: Vec<Vec<Result<f64>>> = prepared
                .par_iter()
                .map(|fold| {
                    let mut warm: Option<PrecisionStack> = None;
                    let mut out: Vec<Result<f64>> = (0..points.len()).map(|_| Ok(0.0)).collect();
                    for &i in &order {
                        out[i] = fold_score(fold, method, points[i], settings, warm.as_ref()).map(
                            |(s, est)| {
                                warm = Some(est);
                                s
                            },
                        );
                    }
                    out
                })
                .collect();
            for i in 0..points.len() {
                let mut total = 0.0;
                let mut failure = None;
                for (j, fold) in per_fold.iter().enumerate() {
                    match &fold[i] {
                        Ok(s) => total += s,
                        Err(e) => {
                            failure = Some(format!("fold {j}: {e}"));
                            break;
                        }
                    }
                }
                match failure {
                    None => scores[i] = Some(total),
                    Some(msg) => errors[i] = Some(msg),
                }
            }
        }
    }

    let Some(best) = argmin(&points, &scores) else {
        let diagnostics = points
            .iter()
            .zip(&errors)
            .map(|(pt, e)| {
                format!(
                    "({}, {}): {}",
                    pt.lambda1,
                    pt.lambda2,
                    e.as_deref().unwrap_or("no score")
                )
            })
            .collect();
        return Err(Error::AllGridPointsFailed(diagnostics));
    };
    let chosen = points[best];
    let chosen_fit = match fits[best].take() {
        Some(f) => {
            fits[best] = Some(f.clone());
            f
        }
        None => fit_covariance(method, &cov, n, chosen, settings, None)?,
    };
    let scores = points
        .iter()
        .zip(scores.iter().zip(errors))
        .map(|(pt, (s, e))| GridScore {
            penalties: *pt,
            score: *s,
            error: e,
        })
        .collect();
    let keep = keep_fits && matches!(criterion, Criterion::Ebic { .. });
    Ok(SelectionReport {
        chosen,
        scores,
        criterion,
        chosen_fit,
        fits: keep.then_some(fits),
    })
}
