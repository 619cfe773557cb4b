//! Incomplete-data score and observed information.
//!
//! With `ξ = (x_k, y_1..y_k)` the incomplete data and the complete data
//! augmented by `x_{k-1}`, the score `S = ∂/∂x_k log f(x_k, y_1..y_k)` is the
//! `w`-average of complete scores over the frozen `k-1` cloud, and
//!
//! ```text
//! J_ξ = J_z - M_z + S S^T,   J_z = H^T R^-1 H + Q^-1,   M_z = Σ w s s^T.
//! ```

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kalman::{kalman_filter, CovarianceForm, KalmanState};
use crate::linalg::{cholesky, spd_inverse, symmetrize, DenseGaussian};
use crate::models::{linear_prior_moments, LinearModel, StateSpace};
use crate::particle::{ParticleCloud, TransitionMixture};
use crate::rng;

/// Score and information matrices at one query state.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEval {
    pub x: DVector<f64>,
    pub score: DVector<f64>,
    pub j_z: DMatrix<f64>,
    pub m_z: DMatrix<f64>,
    pub j_xi: DMatrix<f64>,
    /// `log C(x)`, the log predictive density of `x_k` given `y_1..y_{k-1}`.
    pub log_norm: f64,
}

impl ScoreEval {
    /// `J_{z|ξ} = M_z - S S^T`.
    pub fn conditional_information(&self) -> DMatrix<f64> {
        &self.m_z - &self.score * self.score.transpose()
    }
}

/// `H^T R^-1 (y - H x)`.
pub fn observation_score<M: StateSpace + ?Sized>(
    model: &M,
    k: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let h = model.observation_matrix(k);
    let r = model.measurement_noise(k).dense("R")?;
    Ok(h.transpose() * r.solve(&(y - h * x)))
}

/// `H^T R^-1 H`.
pub fn observation_information<M: StateSpace + ?Sized>(model: &M, k: usize) -> Result<DMatrix<f64>> {
    let h = model.observation_matrix(k);
    let r = model.measurement_noise(k).dense("R")?;
    Ok(symmetrize(&(h.transpose() * r.precision() * h)))
}

/// `∂/∂x_k log f(x_k, y_k, x_{k-1})`.
pub fn complete_score<M: StateSpace + ?Sized>(
    model: &M,
    k: usize,
    x: &DVector<f64>,
    x_prev: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(observation_score(model, k, x, y)? + model.transition_log_grad(k, x, x_prev)?)
}

/// `J_z = H^T R^-1 H + Q^-1`, the same for every parent.
pub fn complete_information<M: StateSpace + ?Sized>(model: &M, k: usize) -> Result<DMatrix<f64>> {
    let q = model.process_noise(k).dense("Q")?;
    Ok(symmetrize(&(observation_information(model, k)? + q.precision())))
}

/// `log f̂(x_k, y_1..y_k) = log C(x_k) + log f(y_k | x_k)`.
pub fn log_incomplete_likelihood<M: StateSpace + ?Sized>(
    model: &M,
    mixture: &TransitionMixture,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    Ok(mixture.log_normalizing_constant(x) + model.observation_log_density(mixture.step(), x, y)?)
}

/// Particle score and information at `x`, using the precomputed mixture.
pub fn particle_score_with<M: StateSpace + ?Sized>(
    model: &M,
    mixture: &TransitionMixture,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<ScoreEval> {
    let k = mixture.step();
    let w = mixture.weights(x)?;
    let q = mixture.process_noise();
    let obs = observation_score(model, k, x, y)?;
    // columns s_n = obs - Q^-1 (x - F(x^n))
    let mut s = -(q.precision() * deviations(mixture, x));
    for mut col in s.column_iter_mut() {
        col += &obs;
    }
    let wv = DVector::from_column_slice(&w);
    let score = &s * &wv;
    let mut ws = s.clone();
    for (mut col, wi) in ws.column_iter_mut().zip(&w) {
        col *= *wi;
    }
    let m_z = symmetrize(&(&ws * s.transpose()));
    let j_z = complete_information(model, k)?;
    let j_xi = symmetrize(&(&j_z - &m_z + &score * score.transpose()));
    Ok(ScoreEval {
        x: x.clone(),
        score,
        j_z,
        m_z,
        j_xi,
        log_norm: mixture.log_normalizing_constant(x),
    })
}

/// Particle score at `x` over the `k-1` cloud.
pub fn particle_score<M: StateSpace + ?Sized>(
    model: &M,
    cloud: &ParticleCloud,
    k: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<ScoreEval> {
    particle_score_with(model, &TransitionMixture::new(model, cloud, k)?, x, y)
}

/// Columns `d_n = x - F_k(x_{k-1}^n)`.
fn deviations(mixture: &TransitionMixture, x: &DVector<f64>) -> DMatrix<f64> {
    let mut d = -mixture.means().clone();
    for mut col in d.column_iter_mut() {
        col += x;
    }
    d
}

/// `J_ξ` from the weight-derivative form
/// `J_z - Q^-1 (Σ w d d^T) Q^-1 + Q^-1 (Σ w d)(Σ w d)^T Q^-1`.
pub fn nonlinear_jxi_with<M: StateSpace + ?Sized>(
    model: &M,
    mixture: &TransitionMixture,
    x: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let w = mixture.weights(x)?;
    let d = deviations(mixture, x);
    let mean = &d * DVector::from_column_slice(&w);
    let mut wd = d.clone();
    for (mut col, wi) in wd.column_iter_mut().zip(&w) {
        col *= *wi;
    }
    let second = &wd * d.transpose();
    let qi = mixture.process_noise().precision();
    let j_z = complete_information(model, mixture.step())?;
    Ok(symmetrize(&(j_z - qi * (second - &mean * mean.transpose()) * qi)))
}

pub fn nonlinear_jxi<M: StateSpace + ?Sized>(
    model: &M,
    cloud: &ParticleCloud,
    k: usize,
    x: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    nonlinear_jxi_with(model, &TransitionMixture::new(model, cloud, k)?, x)
}

/// Closed-form score for a linear model, given the Kalman prediction at `k`.
///
/// `S = -J_ξ (x - x̂_{k|k-1}) + H^T R^-1 (y - H x̂_{k|k-1})` with
/// `J_ξ = H^T R^-1 H + P_{k|k-1}^-1`.
pub fn linear_score(
    model: &LinearModel,
    state: &KalmanState,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<ScoreEval> {
    let k = state.k;
    let pred = DenseGaussian::new(state.p_pred.clone(), "P_{k|k-1}")?;
    let hrh = observation_information(model, k)?;
    let j_xi = symmetrize(&(&hrh + pred.precision()));
    let score = -(&j_xi * (x - &state.x_pred)) + observation_score(model, k, &state.x_pred, y)?;
    let j_z = complete_information(model, k)?;
    let m_z = symmetrize(&(&j_z - &j_xi + &score * score.transpose()));
    Ok(ScoreEval {
        x: x.clone(),
        log_norm: pred.log_density(&(x - &state.x_pred)),
        score,
        j_z,
        m_z,
        j_xi,
    })
}

/// One Monte Carlo identity check, entrywise.
#[derive(Debug, Clone)]
pub struct IdentityCheck {
    pub name: &'static str,
    pub estimate: DMatrix<f64>,
    pub target: DMatrix<f64>,
    pub std_error: DMatrix<f64>,
    /// Largest `|estimate - target| / std_error` over entries.
    pub max_z: f64,
}

impl IdentityCheck {
    fn new(name: &'static str, acc: &MomentAccumulator, target: DMatrix<f64>) -> Self {
        let (estimate, std_error) = acc.finish();
        let max_z = estimate
            .iter()
            .zip(target.iter())
            .zip(std_error.iter())
            .map(|((e, t), s)| {
                let gap = (e - t).abs();
                if *s > 0.0 {
                    gap / s
                } else if gap <= 1e-12 * t.abs().max(1.0) {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max);
        Self {
            name,
            estimate,
            target,
            std_error,
            max_z,
        }
    }

    pub fn passed(&self, z: f64) -> bool {
        self.max_z <= z
    }
}

#[derive(Debug, Clone)]
pub struct IdentityReport {
    pub k: usize,
    pub replicates: usize,
    pub checks: Vec<IdentityCheck>,
}

impl IdentityReport {
    pub fn passed(&self, z: f64) -> bool {
        self.checks.iter().all(|c| c.passed(z))
    }
}

struct MomentAccumulator {
    n: usize,
    sum: DMatrix<f64>,
    sum_sq: DMatrix<f64>,
}

impl MomentAccumulator {
    fn new(rows: usize, cols: usize) -> Self {
        Self {
            n: 0,
            sum: DMatrix::zeros(rows, cols),
            sum_sq: DMatrix::zeros(rows, cols),
        }
    }

    fn push(&mut self, v: &DMatrix<f64>) {
        self.n += 1;
        self.sum += v;
        self.sum_sq += v.component_mul(v);
    }

    fn finish(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.n as f64;
        let mean = &self.sum / n;
        let se = (&self.sum_sq / n - mean.component_mul(&mean))
            .map(|v| (v.max(0.0) * n / (n - 1.0) / n).sqrt());
        (mean, se)
    }
}

/// Monte Carlo check of three score identities for a linear model at step `k`
/// (measurements `y_1..y_k`, none at `k = 0`):
///
/// * `E[S | x_k] = ∂/∂x_k log f(x_k)` at a fixed `x_k` one prior standard
///   deviation from the prior mean;
/// * `E[S S^T] = H^T R^-1 H + P_{k|k-1}^-1`;
/// * `E[s s^T] = H^T R^-1 H + Q^-1` for the complete score at the true states.
pub fn score_identity_suite(
    model: &LinearModel,
    k: usize,
    replicates: usize,
    seed: u64,
) -> Result<IdentityReport> {
    if k == 0 || replicates < 2 {
        return Err(Error::Validation(
            "identity suite needs k >= 1 and at least two replicates".into(),
        ));
    }
    let dims = model.dims();
    let (p, q) = (dims.state, dims.obs);
    let zeros = vec![DVector::zeros(q); k];
    let filter = kalman_filter(model, None, &zeros, CovarianceForm::Plain)?;
    let pred = DenseGaussian::new(filter[k].p_pred.clone(), "P_{k|k-1}")?;
    let j_xi = symmetrize(&(observation_information(model, k)? + pred.precision()));
    let j_z = complete_information(model, k)?;

    // score at x given a path y_1..y_k: gains are data independent
    let score_at = |x: &DVector<f64>, ys: &[DVector<f64>]| -> Result<DVector<f64>> {
        let mut post = model.mu().clone();
        let mut x_pred = post.clone();
        for j in 1..=k {
            x_pred = model.f(j) * &post + model.control_effect(j);
            post = &x_pred + &filter[j].gain * (&ys[j - 1] - model.h(j) * &x_pred);
        }
        Ok(-(&j_xi * (x - &x_pred)) + observation_score(model, k, &x_pred, &ys[k - 1])?)
    };

    // (a): condition the stacked y_1..y_k on x_k
    let (mu_k, sigma_k) = linear_prior_moments(model, k);
    let x_fixed = &mu_k + sigma_k.diagonal().map(f64::sqrt);
    let cond = ConditionalObservations::new(model, k)?;
    let (cond_mean, cond_factor) = cond.given(&x_fixed)?;
    let prior_score = -spd_inverse(&sigma_k, "prior covariance")? * (&x_fixed - &mu_k);

    let mut rng_a = rng::stream(seed, 1);
    let mut acc_a = MomentAccumulator::new(p, 1);
    let mut rng_bc = rng::stream(seed, 2);
    let mut acc_b = MomentAccumulator::new(p, p);
    let mut acc_c = MomentAccumulator::new(p, p);
    let (q_dim, k_steps) = (q, k);
    for _ in 0..replicates {
        let z = DVector::from_fn(q_dim * k_steps, |_, _| rng_a.sample::<f64, _>(StandardNormal));
        let stacked = &cond_mean + &cond_factor * z;
        let ys: Vec<DVector<f64>> = (0..k_steps)
            .map(|j| stacked.rows(j * q_dim, q_dim).into_owned())
            .collect();
        let s = score_at(&x_fixed, &ys)?;
        acc_a.push(&DMatrix::from_column_slice(p, 1, s.as_slice()));

        let (xs, ys) = simulate_path(model, k, &mut rng_bc);
        let s = score_at(&xs[k], &ys)?;
        acc_b.push(&(&s * s.transpose()));
        let sc = complete_score(model, k, &xs[k], &xs[k - 1], &ys[k - 1])?;
        acc_c.push(&(&sc * sc.transpose()));
    }
    Ok(IdentityReport {
        k,
        replicates,
        checks: vec![
            IdentityCheck::new(
                "conditional mean of the score",
                &acc_a,
                DMatrix::from_column_slice(p, 1, prior_score.as_slice()),
            ),
            IdentityCheck::new("score outer product", &acc_b, j_xi),
            IdentityCheck::new("complete score outer product", &acc_c, j_z),
        ],
    })
}

fn simulate_path<R: Rng + ?Sized>(
    model: &LinearModel,
    k: usize,
    rng: &mut R,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut xs = vec![model.initial_mean() + model.initial_noise().sample(rng)];
    let mut ys = Vec::with_capacity(k);
    for j in 1..=k {
        let x = model.transition_mean(j, &xs[j - 1]) + model.process_noise(j).sample(rng);
        ys.push(model.h(j) * &x + model.measurement_noise(j).sample(rng));
        xs.push(x);
    }
    (xs, ys)
}

/// Joint Gaussian law of `(y_1..y_k, x_k)` for a linear model.
struct ConditionalObservations {
    mean_y: DVector<f64>,
    cov_y: DMatrix<f64>,
    cov_yx: DMatrix<f64>,
    mean_x: DVector<f64>,
    cov_x: DMatrix<f64>,
}

impl ConditionalObservations {
    fn new(model: &LinearModel, k: usize) -> Result<Self> {
        let dims = model.dims();
        let (p, q) = (dims.state, dims.obs);
        let moments: Vec<_> = (0..=k).map(|j| linear_prior_moments(model, j)).collect();
        // Cov(x_i, x_j) = Φ(i, j) Σ_j for i >= j
        let cross = |i: usize, j: usize| -> DMatrix<f64> {
            let (hi, lo, flip) = if i >= j { (i, j, false) } else { (j, i, true) };
            let mut c = moments[lo].1.clone();
            for t in lo + 1..=hi {
                c = model.f(t) * c;
            }
            if flip {
                c.transpose()
            } else {
                c
            }
        };
        let mut mean_y = DVector::zeros(q * k);
        let mut cov_y = DMatrix::zeros(q * k, q * k);
        let mut cov_yx = DMatrix::zeros(q * k, p);
        for i in 1..=k {
            let hi = model.h(i);
            mean_y.rows_mut((i - 1) * q, q).copy_from(&(hi * &moments[i].0));
            cov_yx
                .view_mut(((i - 1) * q, 0), (q, p))
                .copy_from(&(hi * cross(i, k)));
            for j in 1..=k {
                let mut block = hi * cross(i, j) * model.h(j).transpose();
                if i == j {
                    block += model.r(i);
                }
                cov_y.view_mut(((i - 1) * q, (j - 1) * q), (q, q)).copy_from(&block);
            }
        }
        let (mean_x, cov_x) = moments[k].clone();
        Ok(Self {
            mean_y,
            cov_y,
            cov_yx,
            mean_x,
            cov_x,
        })
    }

    /// Conditional mean and a square-root factor of the conditional covariance.
    fn given(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let chol = cholesky(&self.cov_x, "prior covariance")?;
        let mean = &self.mean_y + &self.cov_yx * chol.solve(&(x - &self.mean_x));
        let cov = symmetrize(&(&self.cov_y - &self.cov_yx * chol.solve(&self.cov_yx.transpose())));
        let factor = cholesky(&cov, "conditional observation covariance")?.l();
        Ok((mean, factor))
    }
}
