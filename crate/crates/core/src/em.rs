//! Graphical EM: closed-form conditional moments of the latent systemic
//! vector (E-step) alternating with one graphical-lasso solve per layer
//! (M-step), optionally with per-category systemic intensities `α_k`.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glasso::{glasso_objective, glasso_solve, GlassoSettings};
use crate::linalg::{self, Matrix};
use crate::model::{
    block_covariance, log_likelihood_with, penalty_term, quadratic_moment, weighted_cross_products,
    BlockCovariance, FitReport, PanelDataset, PenaltyPair, PrecisionStack, StackFactors,
};
use crate::onestep::{projected_moments, solve_layers};

/// Below this an intensity is treated as collapsed.
pub const ALPHA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmSettings {
    /// Stop once the penalised objective moves by less than this.
    pub delta: f64,
    pub max_iterations: usize,
    pub glasso: GlassoSettings,
    pub estimate_alphas: bool,
}

impl EmSettings {
    /// Defaults for dimension `p`: `delta = 1e-4·p`, 100 iterations.
    pub fn new(p: usize) -> Self {
        Self {
            delta: 1e-4 * p as f64,
            max_iterations: 100,
            glasso: GlassoSettings::default(),
            estimate_alphas: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::InvalidArgument("delta must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument(
                "max_iterations must be at least 1".into(),
            ));
        }
        self.glasso.validate()
    }
}

/// Conditional moments from one E-step.
pub(crate) struct Moments {
    /// `Σ̇₀, Σ̇₁, …, Σ̇_K` at the current intensities.
    pub sigmas: Vec<Matrix>,
    /// `n⁻¹ Σ_i y_{k,i} E(z_i)ᵀ = Σ_l α_l Σ̂_{Y(k,l)} Ω_l A⁻¹`, per category.
    pub cross: Vec<Matrix>,
}

pub(crate) fn conditional_moments(
    cov: &BlockCovariance,
    stack: &PrecisionStack,
) -> Result<Moments> {
    let a_inv = linalg::inverse_spd(&stack.a_matrix(), "A = Ω₀ + Σ α_k² Ω_k")?;
    let t = weighted_cross_products(cov, stack);
    let g = quadratic_moment(stack, &t);
    let mut sigma0 = &a_inv * &g * &a_inv + &a_inv;
    linalg::symmetrize_in_place(&mut sigma0);

    let k = cov.k_categories();
    let cross: Vec<Matrix> = t.iter().map(|tk| tk * &a_inv).collect();
    let mut sigmas = Vec::with_capacity(k + 1);
    sigmas.push(sigma0.clone());
    for c in 0..k {
        let alpha = stack.alpha(c + 1);
        let m = &cross[c];
        let mut s = cov.block(c, c) - (m + m.transpose()) * alpha + &sigma0 * (alpha * alpha);
        linalg::symmetrize_in_place(&mut s);
        sigmas.push(s);
    }
    Ok(Moments { sigmas, cross })
}

/// E-step: `Σ̇₀ = E(zzᵀ | y)` and `Σ̇_k = E{(y_k − α_k z)(y_k − α_k z)ᵀ | y}`
/// averaged over individuals, with `Σ̂_Y` standing in for the data.
pub fn estep(cov: &BlockCovariance, stack: &PrecisionStack) -> Result<Vec<Matrix>> {
    if cov.p() != stack.p() || cov.k_categories() != stack.k_categories() {
        return Err(Error::Dimension(
            "covariance and stack disagree on K or p".into(),
        ));
    }
    Ok(conditional_moments(cov, stack)?.sigmas)
}

fn objective(
    cov: &BlockCovariance,
    stack: &PrecisionStack,
    n: usize,
    pen: PenaltyPair,
) -> Result<f64> {
    let factors = StackFactors::new(stack)?;
    Ok(log_likelihood_with(cov, stack, n, &factors) - penalty_term(stack, n, pen))
}

/// Arguments shared by every EM entry point.
pub(crate) struct EmRun<'a> {
    pub cov: &'a BlockCovariance,
    pub n: usize,
    pub penalties: PenaltyPair,
    pub settings: &'a EmSettings,
    pub init: Option<&'a PrecisionStack>,
    /// Seeds the glasso solves of the initial M-step only.
    pub warm: Option<&'a PrecisionStack>,
}

pub(crate) fn run_em(run: EmRun<'_>) -> Result<FitReport> {
    let EmRun {
        cov,
        n,
        penalties,
        settings,
        init,
        warm,
    } = run;
    settings.validate()?;
    let start = Instant::now();
    let estimate_alphas = settings.estimate_alphas;
    let mut warnings = Vec::new();
    let mut trace = Vec::new();
    let mut iterations = 0;

    let (mut stack, mut previous) = match init {
        Some(init) => {
            if init.p() != cov.p() || init.k_categories() != cov.k_categories() {
                return Err(Error::Dimension(
                    "initial stack does not match the data".into(),
                ));
            }
            let mut init = init.clone();
            if estimate_alphas && !init.has_alphas() {
                init = PrecisionStack::new_unchecked(
                    init.into_omegas(),
                    Some(vec![1.0; cov.k_categories()]),
                )?;
            }
            let p0 = objective(cov, &init, n, penalties)?;
            (init, p0)
        }
        None => {
            let layer_covs = projected_moments(cov)?;
            let (omegas, converged) = solve_layers(&layer_covs, penalties, &settings.glasso, warm)
                .map_err(|e| Error::Glasso {
                    iteration: 1,
                    layer: 0,
                    source: Box::new(e),
                })?;
            note_sweep_limits(&mut warnings, 1, &converged);
            let alphas = estimate_alphas.then(|| vec![1.0; cov.k_categories()]);
            let stack = PrecisionStack::new(omegas, alphas)?;
            let p0 = objective(cov, &stack, n, penalties)?;
            trace.push(p0);
            iterations = 1;
            (stack, p0)
        }
    };

    let mut converged = false;
    while iterations < settings.max_iterations {
        iterations += 1;
        let moments = conditional_moments(cov, &stack)?;
        let iteration = iterations;
        let solved: Vec<(Matrix, bool)> = moments
            .sigmas
            .par_iter()
            .enumerate()
            .map(|(k, s)| {
                let wrap = |e: Error| Error::Glasso {
                    iteration,
                    layer: k,
                    source: Box::new(e),
                };
                let lambda = penalties.for_layer(k);
                let current = stack.omega(k);
                let sol = glasso_solve(s, &settings.glasso.with_lambda(lambda), Some(current))
                    .map_err(wrap)?;
                // The M-step must not lose ground on its own subproblem, otherwise
                // the ascent property is at the mercy of solver tolerances.
                let new_obj = glasso_objective(s, &sol.omega, lambda).map_err(wrap)?;
                let old_obj = glasso_objective(s, current, lambda).map_err(wrap)?;
                let omega = if new_obj <= old_obj {
                    sol.omega
                } else {
                    current.clone()
                };
                Ok((omega, sol.converged))
            })
            .collect::<Result<_>>()?;
        let (omegas, layer_converged): (Vec<Matrix>, Vec<bool>) = solved.into_iter().unzip();
        note_sweep_limits(&mut warnings, iterations, &layer_converged);

        let alphas = if estimate_alphas {
            Some(update_alphas(&omegas, &moments, iterations, &mut warnings))
        } else {
            stack.alphas_raw().map(<[f64]>::to_vec)
        };
        stack = PrecisionStack::new(omegas, alphas)?;
        let current = objective(cov, &stack, n, penalties)?;
        trace.push(current);
        if (current - previous).abs() < settings.delta {
            converged = true;
            break;
        }
        previous = current;
    }

    if estimate_alphas {
        stack = normalize_intensities(stack)?;
    }

    Ok(FitReport {
        edge_count: stack.edge_count(),
        estimate: stack,
        objective_trace: trace,
        iterations,
        converged,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        warnings,
    })
}

fn note_sweep_limits(warnings: &mut Vec<String>, iteration: usize, converged: &[bool]) {
    for (k, c) in converged.iter().enumerate() {
        if !c {
            warnings.push(format!(
                "iteration {iteration}: glasso for layer {k} hit the sweep limit"
            ));
        }
    }
}

/// Closed-form maximiser of the expected complete-data likelihood in `α_k`
/// with the layers fixed at their new values:
/// `α_k = tr{Ω_k (M_k + M_kᵀ)} / (2 tr{Ω_k Σ̇₀})`.
fn update_alphas(
    omegas: &[Matrix],
    moments: &Moments,
    iteration: usize,
    warnings: &mut Vec<String>,
) -> Vec<f64> {
    let sigma0 = &moments.sigmas[0];
    (1..omegas.len())
        .map(|k| {
            let m = &moments.cross[k - 1];
            let num = linalg::trace_of_product(&omegas[k], m) * 2.0;
            let den = 2.0 * linalg::trace_of_product(&omegas[k], sigma0);
            let a = num / den;
            if !(a > ALPHA_FLOOR) || !a.is_finite() {
                warnings.push(format!(
                    "iteration {iteration}: alpha_{k} collapsed to {a:e}; systemic layer vanishing for category {k}"
                ));
                ALPHA_FLOOR
            } else {
                a
            }
        })
        .collect()
}

/// Rescales so that `max diag(Σ₀) = 1` while keeping every `α_k² Σ₀` fixed:
/// `Ω₀ ← c Ω₀`, `α ← √c α` with `c = max diag(Ω₀⁻¹)`.
pub fn normalize_intensities(stack: PrecisionStack) -> Result<PrecisionStack> {
    let sigma0 = linalg::inverse_spd(stack.omega(0), "layer 0")?;
    let c = sigma0.diagonal().max();
    let alphas: Vec<f64> = stack.alphas().iter().map(|a| a * c.sqrt()).collect();
    let mut omegas = stack.into_omegas();
    omegas[0] *= c;
    PrecisionStack::new(omegas, Some(alphas))
}

/// Graphical EM with unit intensities.
///
/// Without `init` the first M-step runs on the projected one-step moments;
/// the objective trace then starts with the one-step objective.
pub fn em_fit(
    data: &PanelDataset,
    penalties: PenaltyPair,
    settings: &EmSettings,
    init: Option<&PrecisionStack>,
) -> Result<FitReport> {
    let cov = block_covariance(data)?;
    let settings = EmSettings {
        estimate_alphas: false,
        ..*settings
    };
    run_em(EmRun {
        cov: &cov,
        n: data.n(),
        penalties,
        settings: &settings,
        init,
        warm: None,
    })
}

/// Graphical EM that also estimates the systemic intensities when
/// `settings.estimate_alphas` is set; otherwise identical to [`em_fit`].
pub fn alpha_em_fit(
    data: &PanelDataset,
    penalties: PenaltyPair,
    settings: &EmSettings,
) -> Result<FitReport> {
    let cov = block_covariance(data)?;
    run_em(EmRun {
        cov: &cov,
        n: data.n(),
        penalties,
        settings,
        init: None,
        warm: None,
    })
}
