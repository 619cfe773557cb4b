//! Recursive maximum-likelihood state estimation over a frozen `k-1` cloud.
//!
//! Every method iterates `x ← x + M^-1 S(x)`; they differ in `M`:
//! `J_ξ` (Newton), `J_z` (EM-gradient) or `M_z` (BHHH). The closed forms are
//! the EM-gradient step written as a Kalman-type update around the
//! `w`-weighted transition mean.

use std::fmt;
use std::str::FromStr;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, sym_spectral_norm, symmetrize};
use crate::models::StateSpace;
use crate::particle::{ParticleCloud, TransitionMixture};
use crate::score::{complete_information, log_incomplete_likelihood, particle_score_with, ScoreEval};

/// Slack allowed in the likelihood-ascent check.
pub const ASCENT_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Newton,
    #[default]
    EmGradient,
    Bhhh,
    ClosedLinear,
    ClosedNonlinear,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Newton,
        Method::EmGradient,
        Method::Bhhh,
        Method::ClosedLinear,
        Method::ClosedNonlinear,
    ];

    /// The closed-form EM-gradient variant the model family admits.
    pub fn closed_form_for<M: StateSpace + ?Sized>(model: &M) -> Method {
        if model.transition_matrix(1).is_some() {
            Method::ClosedLinear
        } else {
            Method::ClosedNonlinear
        }
    }

    /// Whether the iteration is an EM-gradient step (and so ascends).
    pub fn is_em(self) -> bool {
        matches!(self, Method::EmGradient | Method::ClosedLinear | Method::ClosedNonlinear)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Newton => "newton",
            Method::EmGradient => "em_gradient",
            Method::Bhhh => "bhhh",
            Method::ClosedLinear => "closed_linear",
            Method::ClosedNonlinear => "closed_nonlinear",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlConfig {
    pub method: Method,
    /// Stop once the squared step norm falls below this.
    pub epsilon: f64,
    pub max_iter: usize,
    /// Step scale in `(0, 1]`.
    pub damping: f64,
    pub keep_trace: bool,
}

impl Default for MlConfig {
    fn default() -> Self {
        Self {
            method: Method::EmGradient,
            epsilon: 1e-12,
            max_iter: 100,
            damping: 1.0,
            keep_trace: false,
        }
    }
}

impl MlConfig {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::Config("damping must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iteration: usize,
    pub x: DVector<f64>,
    pub score_norm: f64,
    pub log_likelihood: f64,
    /// The requested matrix was not positive definite; an EM-gradient step was used.
    pub fallback: bool,
}

#[derive(Debug, Clone)]
pub struct MlResult {
    pub x_hat: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `‖S(x̂)‖`.
    pub final_score_norm: f64,
    /// `10 ‖M‖ √ε` with `M` the last iteration matrix.
    pub score_tolerance: f64,
    pub fallbacks: usize,
    /// Iterations of an EM-type method where the likelihood dropped by more than [`ASCENT_SLACK`].
    pub ascent_violations: usize,
    /// Score and information at `x̂`.
    pub final_eval: ScoreEval,
    /// Per-iteration records, starting with the initial point; empty unless requested.
    pub trace: Vec<IterRecord>,
}

/// `Q H^T (H Q H^T + R)^-1`.
fn transition_gain<M: StateSpace + ?Sized>(model: &M, k: usize) -> Result<DMatrix<f64>> {
    let h = model.observation_matrix(k);
    let q = model.process_noise(k).cov();
    let r = model.measurement_noise(k).cov();
    let s = symmetrize(&(h * &q * h.transpose() + r));
    let chol = cholesky(&s, "H Q H^T + R")?;
    Ok(chol.solve(&(h * &q)).transpose())
}

fn kalman_form_update<M: StateSpace + ?Sized>(
    model: &M,
    k: usize,
    m: DVector<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let gain = transition_gain(model, k)?;
    let innovation = y - model.observation_matrix(k) * &m;
    Ok(m + gain * innovation)
}

/// `m + Q H^T (H Q H^T + R)^-1 (y - H m)` with `m = F Σ w^n x_{k-1}^n + G u`.
pub fn em_gradient_update_linear<M: StateSpace + ?Sized>(
    model: &M,
    mixture: &TransitionMixture,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let k = mixture.step();
    let f = model
        .transition_matrix(k)
        .ok_or_else(|| Error::Validation("closed_linear needs a linear transition".into()))?;
    let w = mixture.weights(x)?;
    let control = model.transition_mean(k, &DVector::zeros(f.ncols()));
    let m = f * mixture.weighted_parent_mean(&w) + control;
    kalman_form_update(model, k, m, y)
}

/// `m + Q H^T (H Q H^T + R)^-1 (y - H m)` with `m = Σ w^n F_k(x_{k-1}^n)`.
pub fn em_gradient_update_nonlinear<M: StateSpace + ?Sized>(
    model: &M,
    mixture: &TransitionMixture,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let w = mixture.weights(x)?;
    kalman_form_update(model, mixture.step(), mixture.weighted_mean(&w), y)
}

/// `S(c)·(x - c) - ½ (x - c)^T J_z (x - c)`, with `𝒬(c|c)` taken as zero.
pub fn em_surrogate<M: StateSpace + ?Sized>(
    model: &M,
    mixture: &TransitionMixture,
    x_query: &DVector<f64>,
    x_center: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    let eval = particle_score_with(model, mixture, x_center, y)?;
    let d = x_query - x_center;
    Ok(eval.score.dot(&d) - 0.5 * d.dot(&(&eval.j_z * &d)))
}

/// ML estimate of `x_k` given the `k-1` cloud.
pub fn ml_estimate<M: StateSpace + ?Sized>(
    model: &M,
    cloud: &ParticleCloud,
    k: usize,
    y: &DVector<f64>,
    init: &DVector<f64>,
    cfg: &MlConfig,
) -> Result<MlResult> {
    ml_estimate_with(model, &TransitionMixture::new(model, cloud, k)?, y, init, cfg)
}

pub fn ml_estimate_with<M: StateSpace + ?Sized>(
    model: &M,
    mixture: &TransitionMixture,
    y: &DVector<f64>,
    init: &DVector<f64>,
    cfg: &MlConfig,
) -> Result<MlResult> {
    cfg.validate()?;
    if init.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("initial point must be finite".into()));
    }
    let k = mixture.step();
    let j_z = complete_information(model, k)?;
    let j_z_chol = cholesky(&j_z, "J_z")?;
    let track_ll = cfg.keep_trace || cfg.method.is_em();

    let mut x = init.clone();
    let mut eval = particle_score_with(model, mixture, &x, y)?;
    let mut ll = if track_ll {
        log_incomplete_likelihood(model, mixture, &x, y)?
    } else {
        f64::NAN
    };
    let mut trace = Vec::new();
    if cfg.keep_trace {
        trace.push(IterRecord {
            iteration: 0,
            x: x.clone(),
            score_norm: eval.score.norm(),
            log_likelihood: ll,
            fallback: false,
        });
    }
    let mut converged = false;
    let mut iterations = 0;
    let mut fallbacks = 0;
    let mut ascent_violations = 0;
    let mut last_norm = sym_spectral_norm(&j_z);

    while iterations < cfg.max_iter {
        iterations += 1;
        let mut fallback = false;
        let step = match cfg.method {
            Method::EmGradient => j_z_chol.solve(&eval.score),
            Method::Newton | Method::Bhhh => {
                let m = if cfg.method == Method::Newton {
                    &eval.j_xi
                } else {
                    &eval.m_z
                };
                match cholesky(m, "iteration matrix") {
                    Ok(chol) => {
                        last_norm = sym_spectral_norm(m);
                        chol.solve(&eval.score)
                    }
                    Err(_) => {
                        fallback = true;
                        fallbacks += 1;
                        last_norm = sym_spectral_norm(&j_z);
                        debug!("step {k} iteration {iterations}: {} matrix not PD, EM-gradient step", cfg.method);
                        j_z_chol.solve(&eval.score)
                    }
                }
            }
            Method::ClosedLinear => em_gradient_update_linear(model, mixture, &x, y)? - &x,
            Method::ClosedNonlinear => em_gradient_update_nonlinear(model, mixture, &x, y)? - &x,
        };
        let x_next = &x + step * cfg.damping;
        if x_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("iterate diverged at step {k}")));
        }
        let change = (&x_next - &x).norm_squared();
        x = x_next;
        eval = particle_score_with(model, mixture, &x, y)?;
        if track_ll {
            let ll_next = log_incomplete_likelihood(model, mixture, &x, y)?;
            if (cfg.method.is_em() || fallback) && ll_next < ll - ASCENT_SLACK {
                ascent_violations += 1;
                debug!("step {k} iteration {iterations}: likelihood fell by {:e}", ll - ll_next);
            }
            ll = ll_next;
        }
        if cfg.keep_trace {
            trace.push(IterRecord {
                iteration: iterations,
                x: x.clone(),
                score_norm: eval.score.norm(),
                log_likelihood: ll,
                fallback,
            });
        }
        if change < cfg.epsilon {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("ML iteration at step {k} stopped after {iterations} iterations without converging");
    }
    if ascent_violations > 0 {
        warn!("ML iteration at step {k}: {ascent_violations} likelihood decreases");
    }
    Ok(MlResult {
        x_hat: x,
        iterations,
        converged,
        final_score_norm: eval.score.norm(),
        score_tolerance: 10.0 * last_norm * cfg.epsilon.sqrt(),
        fallbacks,
        ascent_violations,
        final_eval: eval,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::{kalman_filter, CovarianceForm};
    use crate::models::{simulate, LinearModel, NonlinearModel};
    use crate::particle::{pf_init, Resampling, run_particle_filter};
    use crate::rng;
    use approx::assert_relative_eq;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn single(x: &[f64]) -> ParticleCloud {
        ParticleCloud::from_parts(0, DMatrix::from_column_slice(x.len(), 1, x), vec![1.0]).unwrap()
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("em-gradient".parse::<Method>().unwrap(), Method::EmGradient);
        assert!("gauss".parse::<Method>().is_err());
    }

    #[test]
    fn config_is_validated() {
        let mut cfg = MlConfig::default();
        cfg.epsilon = 0.0;
        assert!(cfg.validate().is_err());
        cfg = MlConfig::default();
        cfg.damping = 1.5;
        assert!(cfg.validate().is_err());
        cfg = MlConfig::default();
        cfg.max_iter = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_parent_scalar_maximizer_is_product_mean() {
        let model = LinearModel::scalar(1.0, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let cloud = single(&[0.0]);
        for method in Method::ALL {
            if method == Method::Bhhh {
                continue; // M_z = S S^T is rank one here
            }
            let r = ml_estimate(&model, &cloud, 1, &v(&[2.0]), &v(&[0.0]), &MlConfig::with_method(method)).unwrap();
            assert!(r.converged, "{method}");
            assert_relative_eq!(r.x_hat[0], 1.0, epsilon = 1e-6);
            assert!(r.final_score_norm <= r.score_tolerance);
        }
    }

    #[test]
    fn bhhh_falls_back_when_outer_product_is_singular() {
        let model = LinearModel::three_state_benchmark();
        let cloud = single(&[0.0, 0.0, 0.0]);
        let mut cfg = MlConfig::with_method(Method::Bhhh);
        cfg.keep_trace = true;
        let r = ml_estimate(&model, &cloud, 1, &v(&[1.0]), &v(&[0.3, 0.0, 0.0]), &cfg).unwrap();
        assert!(r.fallbacks > 0);
        assert!(r.trace.iter().any(|t| t.fallback));
    }

    #[test]
    fn closed_linear_from_kalman_update_stays_put() {
        // single-parent cloud at x̂_{k-1|k-1} with Q replaced by P_{k|k-1} has the Kalman fixed point
        let model = LinearModel::three_state_benchmark();
        let traj = simulate(&model, 4, 3, false).unwrap();
        let states = kalman_filter(&model, None, &traj.observations, CovarianceForm::Plain).unwrap();
        let k = 4;
        let modified = LinearModel::time_invariant(
            model.f(1).clone(),
            model.h(1).clone(),
            states[k].p_pred.clone(),
            model.r(1),
            model.mu().clone(),
            model.p0(),
        )
        .unwrap();
        let cloud = single(states[k - 1].x_post.as_slice());
        let y = traj.y(k).unwrap();
        let r = ml_estimate(
            &modified,
            &cloud,
            k,
            y,
            &states[k].x_post,
            &MlConfig::with_method(Method::ClosedLinear),
        )
        .unwrap();
        assert!(r.converged && r.iterations <= 2);
        assert!((&r.x_hat - &states[k].x_post).norm() < 1e-10);
    }

    #[test]
    fn closed_forms_equal_generic_em_step() {
        let model = LinearModel::three_state_benchmark();
        let mut rg = rng::stream(17, 0);
        let cloud = pf_init(&model, 200, &mut rg).unwrap();
        let mixture = TransitionMixture::new(&model, &cloud, 1).unwrap();
        let j_z = complete_information(&model, 1).unwrap();
        let chol = cholesky(&j_z, "J_z").unwrap();
        let y = v(&[0.7]);
        for x in [v(&[0.0, 0.0, 0.0]), v(&[0.5, -0.3, 0.2]), v(&[-1.0, 0.4, 0.9])] {
            let e = particle_score_with(&model, &mixture, &x, &y).unwrap();
            let generic = &x + chol.solve(&e.score);
            let lin = em_gradient_update_linear(&model, &mixture, &x, &y).unwrap();
            let nl = em_gradient_update_nonlinear(&model, &mixture, &x, &y).unwrap();
            assert!((&lin - &generic).amax() < 1e-10);
            assert!((&nl - &generic).amax() < 1e-10);
        }
    }

    #[test]
    fn tanh_closed_iteration_matches_two_over_twenty_one() {
        let model = NonlinearModel::tanh_benchmark();
        let cloud = pf_init(&model, 100, &mut rng::stream(2, 0)).unwrap();
        let k = 5;
        let mixture = TransitionMixture::new(&model, &cloud, k).unwrap();
        let y = v(&[0.8]);
        let fk = 1.0 + 0.5 * (2.0 * std::f64::consts::PI * k as f64 / 20.0).sin();
        let x = v(&[0.1]);
        let w = mixture.weights(&x).unwrap();
        let mean: f64 = w
            .iter()
            .zip(mixture.parents().iter())
            .map(|(wi, xp)| wi * fk * (std::f64::consts::PI * xp).tanh())
            .sum();
        let expected = 2.0 / 21.0 * (0.8 + 10.0 * mean);
        let next = em_gradient_update_nonlinear(&model, &mixture, &x, &y).unwrap();
        assert_relative_eq!(next[0], expected, epsilon = 1e-12);
    }

    #[test]
    fn unit_measurement_noise_leaves_prediction_on_no_signal() {
        let model = NonlinearModel::tanh_benchmark();
        let cloud = pf_init(&model, 30, &mut rng::stream(1, 0)).unwrap();
        let mixture = TransitionMixture::new(&model, &cloud, 1).unwrap();
        let x = v(&[0.2]);
        let m = mixture.weighted_mean(&mixture.weights(&x).unwrap());
        let y = model.observation_matrix(1) * &m;
        let next = em_gradient_update_nonlinear(&model, &mixture, &x, &y).unwrap();
        assert_relative_eq!(next[0], m[0], epsilon = 1e-14);
    }

    #[test]
    fn zero_observation_matrix_gives_pure_prediction() {
        let model = LinearModel::scalar(0.8, 0.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let cloud = pf_init(&model, 20, &mut rng::stream(4, 0)).unwrap();
        let mixture = TransitionMixture::new(&model, &cloud, 1).unwrap();
        let x = v(&[0.3]);
        let w = mixture.weights(&x).unwrap();
        let next = em_gradient_update_linear(&model, &mixture, &x, &v(&[5.0])).unwrap();
        assert_relative_eq!(next[0], 0.8 * mixture.weighted_parent_mean(&w)[0], epsilon = 1e-14);
    }

    #[test]
    fn surrogate_grid_argmax_matches_em_step() {
        let model = NonlinearModel::tanh_benchmark();
        let cloud = pf_init(&model, 100, &mut rng::stream(8, 0)).unwrap();
        let mixture = TransitionMixture::new(&model, &cloud, 2).unwrap();
        let y = v(&[-0.4]);
        let c = v(&[0.5]);
        assert_eq!(em_surrogate(&model, &mixture, &c, &c, &y).unwrap(), 0.0);
        let step = em_gradient_update_nonlinear(&model, &mixture, &c, &y).unwrap();
        let h = 1e-3;
        let best = (-1000..=1000)
            .map(|i| v(&[i as f64 * h]))
            .max_by(|a, b| {
                let qa = em_surrogate(&model, &mixture, a, &c, &y).unwrap();
                let qb = em_surrogate(&model, &mixture, b, &c, &y).unwrap();
                qa.total_cmp(&qb)
            })
            .unwrap();
        assert!((best[0] - step[0]).abs() <= h);
    }

    #[test]
    fn em_iterates_ascend_and_methods_agree() {
        let model = NonlinearModel::tanh_benchmark();
        let traj = simulate(&model, 10, 12, false).unwrap();
        let clouds = run_particle_filter(&model, None, &traj.observations, 500, Resampling::Multinomial, 3, 0).unwrap();
        let k = 10;
        let mixture = TransitionMixture::new(&model, &clouds[k - 1], k).unwrap();
        let init = crate::particle::pf_posterior_mean(&clouds[k]);
        let y = traj.y(k).unwrap();
        let mut cfg = MlConfig::with_method(Method::EmGradient);
        cfg.keep_trace = true;
        let em = ml_estimate_with(&model, &mixture, y, &init, &cfg).unwrap();
        assert!(em.converged);
        assert_eq!(em.ascent_violations, 0);
        for pair in em.trace.windows(2) {
            assert!(pair[1].log_likelihood >= pair[0].log_likelihood - ASCENT_SLACK);
        }
        let newton = ml_estimate_with(&model, &mixture, y, &init, &MlConfig::with_method(Method::Newton)).unwrap();
        assert!((&newton.x_hat - &em.x_hat).norm() < 10.0 * cfg.epsilon.sqrt());
    }
}
