//! Ground-truth generators and panel-data sampling for simulation studies.
//!
//! The chain and nearest-neighbour constructions below are the normative
//! definitions used by this crate:
//!
//! * chain: positions `s₁ = 0`, `s_i = s_{i−1} + u_i` with `u_i ~ U(0.5, 1)`,
//!   covariance `Σ_ij = exp(−|s_i − s_j| / 2)`, precision `Σ⁻¹` (tridiagonal).
//! * nearest neighbour: `p` points uniform on the unit square, each joined to
//!   its `m` nearest points (union of the directed choices), edge weights
//!   uniform on `[−1, −0.5] ∪ [0.5, 1]` and diagonal `1.5·Σ_j |ω_ij| + 0.1`.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{center_and_wrap, PanelDataset, PrecisionStack};
use crate::rng::{stream, Purpose, StreamRng};

/// Smallest eigenvalue enforced after a perturbation.
pub const PERTURB_MIN_EIGENVALUE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Topology {
    Chain,
    NearestNeighbor { m: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub topology: Topology,
    pub p: usize,
    pub rho: f64,
    pub seed: u64,
}

impl NetworkSpec {
    /// Base topology followed by a `rho` perturbation, on independent streams.
    pub fn generate(&self) -> Result<Matrix> {
        let mut rng = stream(self.seed, Purpose::Topology, 0);
        let base = base_network(self.topology, self.p, &mut rng)?;
        let mut rng = stream(self.seed, Purpose::Perturbation, 0);
        perturb_with(&base, self.rho, &mut rng)
    }
}

/// Category/systemic topology pairings of the simulation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    /// Chain categories, nearest-neighbour systemic layer.
    I,
    /// Nearest-neighbour everywhere.
    II,
    /// Chain everywhere.
    III,
    /// Nearest-neighbour categories, chain systemic layer.
    IV,
}

impl Architecture {
    /// `(category topology, systemic topology)`.
    pub fn topologies(self, m: usize) -> (Topology, Topology) {
        let nn = Topology::NearestNeighbor { m };
        match self {
            Architecture::I => (Topology::Chain, nn),
            Architecture::II => (nn, nn),
            Architecture::III => (Topology::Chain, Topology::Chain),
            Architecture::IV => (nn, Topology::Chain),
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "I" | "1" => Ok(Architecture::I),
            "II" | "2" => Ok(Architecture::II),
            "III" | "3" => Ok(Architecture::III),
            "IV" | "4" => Ok(Architecture::IV),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub architecture: Architecture,
    pub p: usize,
    pub n: usize,
    pub k: usize,
    /// Neighbour count for nearest-neighbour layers.
    pub m: usize,
    pub rho: f64,
    pub seed: u64,
    /// Systemic intensities; unit when absent.
    #[serde(default)]
    pub alphas: Option<Vec<f64>>,
    /// When false the data carry no systemic component (`Σ₀ = 0`). The
    /// returned truth still holds the generated `Ω₀`.
    #[serde(default = "default_true")]
    pub systemic: bool,
}

fn default_true() -> bool {
    true
}

impl ScenarioSpec {
    pub fn new(
        architecture: Architecture,
        p: usize,
        n: usize,
        k: usize,
        m: usize,
        rho: f64,
        seed: u64,
    ) -> Self {
        Self {
            architecture,
            p,
            n,
            k,
            m,
            rho,
            seed,
            alphas: None,
            systemic: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::TooFewCategories(self.k));
        }
        if self.n < 2 {
            return Err(Error::InvalidArgument("n must be at least 2".into()));
        }
        if self.p < 2 {
            return Err(Error::InvalidArgument("p must be at least 2".into()));
        }
        let (cat, sys) = self.architecture.topologies(self.m);
        for t in [cat, sys] {
            if let Topology::NearestNeighbor { m } = t {
                if m == 0 || m >= self.p {
                    return Err(Error::InvalidArgument(format!(
                        "neighbour count m = {m} must satisfy 1 <= m < p = {}",
                        self.p
                    )));
                }
            }
        }
        if !self.rho.is_finite() || self.rho < 0.0 {
            return Err(Error::InvalidArgument("rho must be non-negative".into()));
        }
        if let Some(a) = &self.alphas {
            if a.len() != self.k {
                return Err(Error::Dimension(format!(
                    "expected {} alphas, got {}",
                    self.k,
                    a.len()
                )));
            }
        }
        Ok(())
    }
}

fn uniform_edge_weight(rng: &mut StreamRng) -> f64 {
    let magnitude = rng.random_range(0.5..=1.0);
    if rng.random_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

fn chain_with(p: usize, rng: &mut StreamRng) -> Result<Matrix> {
    if p < 2 {
        return Err(Error::InvalidArgument("chain network needs p >= 2".into()));
    }
    let mut s = vec![0.0f64; p];
    for i in 1..p {
        s[i] = s[i - 1] + rng.random_range(0.5..1.0);
    }
    let sigma = DMatrix::from_fn(p, p, |i, j| (-(s[i] - s[j]).abs() / 2.0).exp());
    let mut omega = linalg::inverse_spd(&sigma, "chain covariance")?;
    omega.iter_mut().for_each(|v| {
        if v.abs() < 1e-10 {
            *v = 0.0;
        }
    });
    Ok(omega)
}

/// Tridiagonal chain precision.
pub fn chain_precision(p: usize, seed: u64) -> Result<Matrix> {
    chain_with(p, &mut stream(seed, Purpose::Topology, 0))
}

fn nn_with(p: usize, m: usize, rng: &mut StreamRng) -> Result<Matrix> {
    if m == 0 || m >= p {
        return Err(Error::InvalidArgument(format!(
            "neighbour count m = {m} must satisfy 1 <= m < p = {p}"
        )));
    }
    let points: Vec<(f64, f64)> = (0..p)
        .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
        .collect();
    let mut adjacent = vec![false; p * p];
    let mut order: Vec<usize> = Vec::with_capacity(p);
    for i in 0..p {
        order.clear();
        order.extend((0..p).filter(|&j| j != i));
        let d = |j: usize| {
            let (dx, dy) = (points[i].0 - points[j].0, points[i].1 - points[j].1);
            dx * dx + dy * dy
        };
        order.sort_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b)));
        for &j in order.iter().take(m) {
            adjacent[i * p + j] = true;
            adjacent[j * p + i] = true;
        }
    }
    let mut omega = Matrix::zeros(p, p);
    for j in 0..p {
        for i in 0..j {
            if adjacent[i * p + j] {
                let w = uniform_edge_weight(rng);
                omega[(i, j)] = w;
                omega[(j, i)] = w;
            }
        }
    }
    for i in 0..p {
        let row: f64 = omega.row(i).iter().map(|v| v.abs()).sum();
        omega[(i, i)] = 1.5 * row + 0.1;
    }
    Ok(omega)
}

/// Planar `m`-nearest-neighbour precision, strictly diagonally dominant.
pub fn nn_precision(p: usize, m: usize, seed: u64) -> Result<Matrix> {
    nn_with(p, m, &mut stream(seed, Purpose::Topology, 0))
}

fn base_network(topology: Topology, p: usize, rng: &mut StreamRng) -> Result<Matrix> {
    match topology {
        Topology::Chain => chain_with(p, rng),
        Topology::NearestNeighbor { m } => nn_with(p, m, rng),
    }
}

fn perturb_with(omega: &Matrix, rho: f64, rng: &mut StreamRng) -> Result<Matrix> {
    if !rho.is_finite() || rho < 0.0 {
        return Err(Error::InvalidArgument("rho must be non-negative".into()));
    }
    if rho == 0.0 {
        return Ok(omega.clone());
    }
    let p = omega.nrows();
    let existing = linalg::offdiag_support_pairs(omega);
    let requested = (rho * existing as f64).round() as usize;
    let mut zeros = Vec::new();
    for j in 0..p {
        for i in 0..j {
            if omega[(i, j)] == 0.0 && omega[(j, i)] == 0.0 {
                zeros.push((i, j));
            }
        }
    }
    if requested > zeros.len() {
        return Err(Error::Saturated {
            requested,
            available: zeros.len(),
        });
    }
    let mut out = omega.clone();
    let mut chosen = index::sample(rng, zeros.len(), requested).into_vec();
    chosen.sort_unstable();
    for idx in chosen {
        let (i, j) = zeros[idx];
        let w = uniform_edge_weight(rng);
        out[(i, j)] = w;
        out[(j, i)] = w;
    }
    let min_eig = linalg::min_eigenvalue(&out);
    if min_eig < PERTURB_MIN_EIGENVALUE {
        let shift = PERTURB_MIN_EIGENVALUE - min_eig;
        for i in 0..p {
            out[(i, i)] += shift;
        }
    }
    Ok(out)
}

/// Adds `round(ρ·T)` random edges (`T` = current edge count) with weights on
/// `[−1, −0.5] ∪ [0.5, 1]`, then shifts the diagonal by the smallest amount
/// that makes the minimum eigenvalue at least 0.05.
pub fn perturb(omega: &Matrix, rho: f64, seed: u64) -> Result<Matrix> {
    perturb_with(omega, rho, &mut stream(seed, Purpose::Perturbation, 0))
}

/// Generating stack for a scenario: layer 0 systemic, 1..=K categories.
pub fn scenario_truth(spec: &ScenarioSpec) -> Result<PrecisionStack> {
    spec.validate()?;
    let (cat, sys) = spec.architecture.topologies(spec.m);
    let mut omegas = Vec::with_capacity(spec.k + 1);
    for layer in 0..=spec.k {
        let topology = if layer == 0 { sys } else { cat };
        let mut rng = stream(spec.seed, Purpose::Topology, layer as u64);
        let base = base_network(topology, spec.p, &mut rng)?;
        let mut rng = stream(spec.seed, Purpose::Perturbation, layer as u64);
        omegas.push(perturb_with(&base, spec.rho, &mut rng)?);
    }
    PrecisionStack::new(omegas, spec.alphas.clone())
}

fn gaussian_draws(cov: &Matrix, n: usize, rng: &mut StreamRng) -> Result<Matrix> {
    let p = cov.nrows();
    let chol = linalg::cholesky(cov, "layer covariance")?;
    let xi = DMatrix::from_fn(p, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(chol.l() * xi)
}

/// Draws `n` individuals from the model defined by `truth`: `z ~ N(0, Ω₀⁻¹)`,
/// `x_k ~ N(0, Ω_k⁻¹)`, `y_k = x_k + α_k z`; columns are then centred.
pub fn sample_from_stack(
    truth: &PrecisionStack,
    n: usize,
    seed: u64,
    systemic: bool,
) -> Result<PanelDataset> {
    let (k, p) = (truth.k_categories(), truth.p());
    let mut values = Matrix::zeros(n, k * p);
    if systemic {
        let sigma0 = linalg::inverse_spd(truth.omega(0), "layer 0")?;
        let z = gaussian_draws(&sigma0, n, &mut stream(seed, Purpose::SystemicDraw, 0))?;
        for c in 0..k {
            let a = truth.alpha(c + 1);
            for i in 0..n {
                for j in 0..p {
                    values[(i, c * p + j)] = a * z[(j, i)];
                }
            }
        }
    }
    for c in 0..k {
        let sigma = linalg::inverse_spd(truth.omega(c + 1), &format!("layer {}", c + 1))?;
        let x = gaussian_draws(
            &sigma,
            n,
            &mut stream(seed, Purpose::CategoryDraw, c as u64 + 1),
        )?;
        for i in 0..n {
            for j in 0..p {
                values[(i, c * p + j)] += x[(j, i)];
            }
        }
    }
    center_and_wrap(values, k, p)
}

/// Simulated dataset plus its generating stack.
pub fn sample_panel(spec: &ScenarioSpec) -> Result<(PanelDataset, PrecisionStack)> {
    let truth = scenario_truth(spec)?;
    let data = sample_from_stack(&truth, spec.n, spec.seed, spec.systemic)?;
    Ok((data, truth))
}
