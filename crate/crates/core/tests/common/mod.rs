#![allow(dead_code)]

use lqg_deceive::lqg::{CostParams, LinearSystem};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn symmetric(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let g = gaussian(rng, n, n);
    (&g + g.transpose()) * 0.5
}

/// Symmetric with eigenvalues in `[lo, lo + 1]`.
pub fn spd(rng: &mut ChaCha8Rng, n: usize, lo: f64) -> DMatrix<f64> {
    let g = gaussian(rng, n, n);
    let s = &g * g.transpose();
    let top = s.symmetric_eigenvalues().max().max(1e-12);
    s / top + DMatrix::identity(n, n) * lo
}

/// Controllable plant with `rho(A) <= 1.2` and a strictly convex cost.
pub fn random_problem(rng: &mut ChaCha8Rng, n: usize, m: usize) -> (LinearSystem, CostParams, f64) {
    loop {
        let a = gaussian(rng, n, n);
        let rho = lqg_deceive::linalg::spectral_radius(&a).max(1e-9);
        let a = a * (rng.random_range(0.3..1.2) / rho);
        let b = gaussian(rng, n, m);
        if !lqg_deceive::linalg::is_controllable(&a, &b) {
            continue;
        }
        let sys = LinearSystem::new(a, b, DMatrix::identity(n, n), rng.random_range(0.0..0.5)).unwrap();
        let cost = CostParams::new(spd(rng, n, 0.2), spd(rng, m, 0.2), gaussian_vec(rng, n), rng.random_range(0.0..1.0)).unwrap();
        let gamma = rng.random_range(0.5..0.95);
        return (sys, cost, gamma);
    }
}
