#![allow(dead_code)]

use mlfilter::models::LinearModel;
use mlfilter::rng::{stream, StreamRng};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> StreamRng {
    stream(seed, 77)
}

pub fn gaussian_matrix(rng: &mut StreamRng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// `A A^T / p + floor I`.
pub fn random_spd(rng: &mut StreamRng, p: usize, floor: f64) -> DMatrix<f64> {
    let a = gaussian_matrix(rng, p, p);
    let m = &a * a.transpose() / p as f64 + DMatrix::identity(p, p) * floor;
    (&m + m.transpose()) * 0.5
}

/// A stable random linear model (`ρ(F) <= 0.95`).
pub fn random_linear(seed: u64, p: usize, q: usize) -> LinearModel {
    let mut rng = rng(seed);
    let mut f = gaussian_matrix(&mut rng, p, p);
    let rho = f.complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max);
    if rho > 0.95 {
        f *= 0.95 / rho;
    }
    let h = gaussian_matrix(&mut rng, q, p);
    let qm = random_spd(&mut rng, p, 0.1);
    let r = random_spd(&mut rng, q, 0.1);
    let mu = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let p0 = random_spd(&mut rng, p, 0.1);
    LinearModel::time_invariant(f, h, qm, r, mu, p0).expect("valid random model")
}

pub fn min_eig(m: &DMatrix<f64>) -> f64 {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}
