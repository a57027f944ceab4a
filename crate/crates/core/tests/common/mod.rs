//! Independent dense-matrix oracles and random instance generators shared by
//! the integration suites.

#![allow(dead_code)]

use mlgem_core::{Matrix, PrecisionStack};
use nalgebra::Cholesky;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random well-conditioned SPD matrix `BBᵀ/p + shift·I`.
pub fn random_spd(p: usize, shift: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let b = Matrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut m = &b * b.transpose() / p as f64;
    for i in 0..p {
        m[(i, i)] += shift;
    }
    (&m + m.transpose()) / 2.0
}

/// Random sparse SPD precision: a few random off-diagonal entries and a
/// dominant diagonal.
pub fn random_sparse_precision(p: usize, density: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(p, p);
    for j in 0..p {
        for i in 0..j {
            if rng.random::<f64>() < density {
                let v = rng.random_range(0.2..0.6) * if rng.random::<bool>() { 1.0 } else { -1.0 };
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
    }
    for i in 0..p {
        let row: f64 = (0..p).filter(|&j| j != i).map(|j| m[(i, j)].abs()).sum();
        m[(i, i)] = row + rng.random_range(0.5..1.5);
    }
    m
}

pub fn random_stack(
    k: usize,
    p: usize,
    alphas: Option<Vec<f64>>,
    rng: &mut ChaCha8Rng,
) -> PrecisionStack {
    let omegas = (0..=k).map(|_| random_spd(p, 0.5, rng)).collect();
    PrecisionStack::new(omegas, alphas).unwrap()
}

/// `Σ_Y` assembled directly from layer covariances.
pub fn dense_sigma_y(stack: &PrecisionStack) -> Matrix {
    let (k, p) = (stack.k_categories(), stack.p());
    let inv = |m: &Matrix| m.clone().try_inverse().unwrap();
    let sigma0 = inv(stack.omega(0));
    let mut out = Matrix::zeros(k * p, k * p);
    for l in 0..k {
        for m in 0..k {
            let mut block = &sigma0 * (stack.alpha(l + 1) * stack.alpha(m + 1));
            if l == m {
                block += inv(stack.omega(l + 1));
            }
            out.view_mut((l * p, m * p), (p, p)).copy_from(&block);
        }
    }
    (&out + out.transpose()) / 2.0
}

/// Sum of per-row multivariate normal log densities.
pub fn mvn_log_density(rows: &Matrix, sigma: &Matrix) -> f64 {
    let d = sigma.nrows();
    let chol = Cholesky::new(sigma.clone()).unwrap();
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mut total = 0.0;
    for i in 0..rows.nrows() {
        let y = rows.row(i).transpose();
        let sol = chol.solve(&y);
        total += -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + y.dot(&sol));
    }
    total
}

/// Conditional moments by Gaussian conditioning on the stacked vector:
/// `E(z|y) = C Σ_Y⁻¹ y`, `var(z|y) = Σ₀ − C Σ_Y⁻¹ Cᵀ` with
/// `C = cov(z, y) = [α₁Σ₀ … α_KΣ₀]`.
pub fn dense_estep(stack: &PrecisionStack, s: &Matrix) -> Vec<Matrix> {
    let (k, p) = (stack.k_categories(), stack.p());
    let sigma0 = stack.omega(0).clone().try_inverse().unwrap();
    let sy = dense_sigma_y(stack);
    let mut c = Matrix::zeros(p, k * p);
    for l in 0..k {
        c.view_mut((0, l * p), (p, p))
            .copy_from(&(&sigma0 * stack.alpha(l + 1)));
    }
    let b = &c * sy.try_inverse().unwrap();
    let post_var = &sigma0 - &b * c.transpose();
    let szz = &post_var + &b * s * b.transpose();
    let mut out = vec![szz.clone()];
    for l in 0..k {
        let a = stack.alpha(l + 1);
        let s_kk = s.view((l * p, l * p), (p, p)).into_owned();
        let s_k_all = s.view((l * p, 0), (p, k * p)).into_owned();
        let syz = &s_k_all * b.transpose();
        out.push(s_kk - (&syz + syz.transpose()) * a + &szz * (a * a));
    }
    out
}

/// Draws `n` rows from `N(0, sigma)`.
pub fn gaussian_rows(n: usize, sigma: &Matrix, rng: &mut ChaCha8Rng) -> Matrix {
    let l = Cholesky::new(sigma.clone()).unwrap().l();
    let xi = Matrix::from_fn(n, sigma.nrows(), |_, _| {
        rng.sample::<f64, _>(StandardNormal)
    });
    xi * l.transpose()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 0 {
        (values[m - 1] + values[m]) / 2.0
    } else {
        values[m]
    }
}
