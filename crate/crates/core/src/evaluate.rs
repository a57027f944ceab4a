//! Loss and support-recovery metrics comparing an estimated stack to truth.

use std::collections::BTreeSet;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{block_covariance, PanelDataset, PrecisionStack};
use crate::select::{fit_covariance, FitMethod, FitSettings, LambdaGrid};

/// Unordered off-diagonal support `{(i, j) : i < j, ω_ij ≠ 0}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSet {
    pub p: usize,
    pub pairs: BTreeSet<(usize, usize)>,
}

impl EdgeSet {
    pub fn from_matrix(m: &Matrix) -> Self {
        let p = m.nrows();
        let mut pairs = BTreeSet::new();
        for j in 0..p {
            for i in 0..j {
                if m[(i, j)] != 0.0 || m[(j, i)] != 0.0 {
                    pairs.insert((i, j));
                }
            }
        }
        Self { p, pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn possible_pairs(&self) -> usize {
        self.p * (self.p.saturating_sub(1)) / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub entropy_loss: f64,
    pub frobenius_loss: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub hamming: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SupportCounts {
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_edges: usize,
    pub possible_pairs: usize,
}

impl SupportCounts {
    pub fn fp_rate(&self) -> f64 {
        let negatives = self.possible_pairs - self.true_edges;
        if negatives == 0 {
            0.0
        } else {
            self.false_positives as f64 / negatives as f64
        }
    }

    pub fn fn_rate(&self) -> f64 {
        if self.true_edges == 0 {
            0.0
        } else {
            self.false_negatives as f64 / self.true_edges as f64
        }
    }

    pub fn hamming(&self) -> f64 {
        if self.possible_pairs == 0 {
            0.0
        } else {
            (self.false_positives + self.false_negatives) as f64 / self.possible_pairs as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportMetrics {
    /// Pooled over all layers, as fractions.
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub hamming: f64,
    /// Set when the truth has no edges at all, leaving FN undefined.
    pub fn_undefined: bool,
    /// Index 0 is the systemic layer.
    pub per_layer: Vec<SupportCounts>,
}

fn check_pair(truth: &PrecisionStack, est: &PrecisionStack) -> Result<()> {
    if truth.p() != est.p() || truth.k_categories() != est.k_categories() {
        return Err(Error::Dimension(format!(
            "truth is K={} p={}, estimate is K={} p={}",
            truth.k_categories(),
            truth.p(),
            est.k_categories(),
            est.p()
        )));
    }
    Ok(())
}

/// `(K+1)⁻¹ Σ_k {tr(Ω*_k⁻¹ Ω̂_k) − log det(Ω*_k⁻¹ Ω̂_k)} − p`.
pub fn entropy_loss(truth: &PrecisionStack, est: &PrecisionStack) -> Result<f64> {
    check_pair(truth, est)?;
    let layers = truth.omegas().len();
    let mut acc = 0.0;
    for k in 0..layers {
        let sigma = linalg::inverse_spd(truth.omega(k), &format!("true layer {k}"))?;
        let ld_true = linalg::logdet_spd(truth.omega(k), &format!("true layer {k}"))?;
        let ld_est = linalg::logdet_spd(est.omega(k), &format!("estimated layer {k}"))?;
        acc += linalg::trace_of_product(&sigma, est.omega(k)) - (ld_est - ld_true);
    }
    Ok(acc / layers as f64 - truth.p() as f64)
}

/// `(K+1)⁻¹ Σ_k ‖Ω*_k − Ω̂_k‖²_F / ‖Ω*_k‖²_F`.
pub fn frobenius_loss(truth: &PrecisionStack, est: &PrecisionStack) -> Result<f64> {
    check_pair(truth, est)?;
    let layers = truth.omegas().len();
    let acc: f64 = (0..layers)
        .map(|k| (truth.omega(k) - est.omega(k)).norm_squared() / truth.omega(k).norm_squared())
        .sum();
    Ok(acc / layers as f64)
}

/// False-positive, false-negative and Hamming rates pooled over layers.
pub fn support_metrics(truth: &PrecisionStack, est: &PrecisionStack) -> Result<SupportMetrics> {
    check_pair(truth, est)?;
    let per_layer: Vec<SupportCounts> = truth
        .omegas()
        .iter()
        .zip(est.omegas())
        .map(|(t, e)| {
            let (t, e) = (EdgeSet::from_matrix(t), EdgeSet::from_matrix(e));
            SupportCounts {
                false_positives: e.pairs.difference(&t.pairs).count(),
                false_negatives: t.pairs.difference(&e.pairs).count(),
                true_edges: t.len(),
                possible_pairs: t.possible_pairs(),
            }
        })
        .collect();
    let pooled = per_layer
        .iter()
        .fold(SupportCounts::default(), |a, c| SupportCounts {
            false_positives: a.false_positives + c.false_positives,
            false_negatives: a.false_negatives + c.false_negatives,
            true_edges: a.true_edges + c.true_edges,
            possible_pairs: a.possible_pairs + c.possible_pairs,
        });
    Ok(SupportMetrics {
        fp_rate: pooled.fp_rate(),
        fn_rate: pooled.fn_rate(),
        hamming: pooled.hamming(),
        fn_undefined: pooled.true_edges == 0,
        per_layer,
    })
}

pub fn metric_report(truth: &PrecisionStack, est: &PrecisionStack) -> Result<MetricReport> {
    let support = support_metrics(truth, est)?;
    Ok(MetricReport {
        entropy_loss: entropy_loss(truth, est)?,
        frobenius_loss: frobenius_loss(truth, est)?,
        fp_rate: support.fp_rate,
        fn_rate: support.fn_rate,
        hamming: support.hamming,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub lambda: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Sorted by false-positive rate, then true-positive rate.
    pub points: Vec<RocPoint>,
    /// Grid points whose fit failed and were skipped.
    pub failures: usize,
}

impl RocCurve {
    pub fn auc(&self) -> f64 {
        let pts: Vec<(f64, f64)> = self.points.iter().map(|p| (p.fpr, p.tpr)).collect();
        auc(&pts)
    }
}

/// Trapezoidal area under `(fpr, tpr)` points after adding `(0,0)` and `(1,1)`.
pub fn auc(points: &[(f64, f64)]) -> f64 {
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(points.len() + 2);
    pts.push((0.0, 0.0));
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.extend(sorted);
    pts.push((1.0, 1.0));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Traces pooled `(FPR, TPR)` over a tied `λ₁ = λ₂` grid.
pub fn roc_curve(
    data: &PanelDataset,
    truth: &PrecisionStack,
    method: FitMethod,
    grid: &LambdaGrid,
    settings: &FitSettings,
) -> Result<RocCurve> {
    grid.validate()?;
    if !grid.tie_to_equal {
        return Err(Error::InvalidArgument(
            "ROC grids must tie lambda1 = lambda2".into(),
        ));
    }
    let cov = block_covariance(data)?;
    let mut points = Vec::new();
    let mut failures = 0;
    let mut warm: Option<PrecisionStack> = None;
    for penalties in grid.points().into_iter().rev() {
        match fit_covariance(method, &cov, data.n(), penalties, settings, warm.as_ref()) {
            Ok(fit) => {
                let s = support_metrics(truth, &fit.estimate)?;
                points.push(RocPoint {
                    lambda: penalties.lambda1,
                    fpr: s.fp_rate,
                    tpr: 1.0 - s.fn_rate,
                });
                warm = Some(fit.estimate);
            }
            Err(e) => {
                warn!("ROC point lambda = {} failed: {e}", penalties.lambda1);
                failures += 1;
            }
        }
    }
    points.sort_by(|a, b| a.fpr.total_cmp(&b.fpr).then(a.tpr.total_cmp(&b.tpr)));
    Ok(RocCurve { points, failures })
}
