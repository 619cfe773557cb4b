//! Exact linear-Gaussian filtering.
//!
//! Runs the predict/update recursion from `x̂_{0|-1} = mu`, `P_{0|-1} = P0`.
//! When `y_0` is supplied the first update happens at `k = 0`; otherwise the
//! `k = 0` state carries the prior with a zero gain.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, max_abs, symmetrize};
use crate::models::{LinearModel, StateSpace};

/// Filter quantities at one step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub k: usize,
    /// `x̂_{k|k-1}`
    pub x_pred: DVector<f64>,
    /// `P_{k|k-1}`
    pub p_pred: DMatrix<f64>,
    /// `x̂_{k|k}`
    pub x_post: DVector<f64>,
    /// `P_{k|k}`
    pub p_post: DMatrix<f64>,
    /// `K_k`; zero when step `k` had no measurement.
    pub gain: DMatrix<f64>,
    /// `Σ_{k|k-1} = E[(x_{k-1} - x̂_{k-1|k-1})(x_k - x̂_{k|k-1})^T]`, filled by
    /// [`smoothing_cross_cov`]. Undefined at `k = 0`.
    pub sigma_cross: Option<DMatrix<f64>>,
    /// `ȳ_k = y_k - H_k x̂_{k|k-1}`; empty when unobserved.
    pub innovation: DVector<f64>,
}

impl KalmanState {
    pub fn observed(&self) -> bool {
        !self.innovation.is_empty()
    }
}

/// How `P_{k|k}` is formed from the gain.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum CovarianceForm {
    /// `(I - K H) P_{k|k-1}`
    #[default]
    Plain,
    /// `(I - K H) P_{k|k-1} (I - K H)^T + K R K^T`
    Joseph,
}

pub fn initial_prediction(model: &LinearModel) -> (DVector<f64>, DMatrix<f64>) {
    (model.mu().clone(), model.p0())
}

/// Time update into step `k`: `x̂_{k|k-1} = F_k x̂ + G_k u_k`, `P_{k|k-1} = F_k P F_k^T + Q_k`.
pub fn kalman_predict(
    model: &LinearModel,
    k: usize,
    x_post: &DVector<f64>,
    p_post: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let f = model.f(k);
    let x = f * x_post + model.control_effect(k);
    let p = symmetrize(&(f * p_post * f.transpose() + model.q(k)));
    (x, p)
}

/// Measurement update at step `k`.
pub fn kalman_update(
    model: &LinearModel,
    k: usize,
    x_pred: DVector<f64>,
    p_pred: DMatrix<f64>,
    y: &DVector<f64>,
    form: CovarianceForm,
) -> Result<KalmanState> {
    let h = model.h(k);
    let r = model.r(k);
    if y.len() != h.nrows() {
        return Err(Error::Validation(format!(
            "observation at step {k} has length {}, expected {}",
            y.len(),
            h.nrows()
        )));
    }
    let s = symmetrize(&(h * &p_pred * h.transpose() + &r));
    let chol = cholesky(&s, "innovation covariance")
        .map_err(|_| Error::Numerical(format!("innovation covariance at step {k} is not SPD")))?;
    let pht = &p_pred * h.transpose();
    let gain = chol.solve(&pht.transpose()).transpose();
    let innovation = y - h * &x_pred;
    let x_post = &x_pred + &gain * &innovation;
    let i_kh = DMatrix::identity(p_pred.nrows(), p_pred.ncols()) - &gain * h;
    let p_post = match form {
        CovarianceForm::Plain => &i_kh * &p_pred,
        CovarianceForm::Joseph => {
            &i_kh * &p_pred * i_kh.transpose() + &gain * &r * gain.transpose()
        }
    };
    Ok(KalmanState {
        k,
        p_post: symmetrize(&p_post),
        x_post,
        x_pred,
        p_pred,
        gain,
        sigma_cross: None,
        innovation,
    })
}

/// State at a step without a measurement: the posterior is the prediction.
pub fn unobserved_state(k: usize, x_pred: DVector<f64>, p_pred: DMatrix<f64>, obs_dim: usize) -> KalmanState {
    let p = x_pred.len();
    KalmanState {
        k,
        x_post: x_pred.clone(),
        p_post: p_pred.clone(),
        x_pred,
        p_pred,
        gain: DMatrix::zeros(p, obs_dim),
        sigma_cross: None,
        innovation: DVector::zeros(0),
    }
}

/// Filter `y_1..y_K` (and `y_0` if given); returns states for `k = 0..=K`
/// with `sigma_cross` filled in.
pub fn kalman_filter(
    model: &LinearModel,
    y0: Option<&DVector<f64>>,
    ys: &[DVector<f64>],
    form: CovarianceForm,
) -> Result<Vec<KalmanState>> {
    let mut states = Vec::with_capacity(ys.len() + 1);
    let (x, p) = initial_prediction(model);
    states.push(match y0 {
        Some(y) => kalman_update(model, 0, x, p, y, form)?,
        None => unobserved_state(0, x, p, model.dims().obs),
    });
    for (i, y) in ys.iter().enumerate() {
        let k = i + 1;
        let prev = &states[k - 1];
        let (x, p) = kalman_predict(model, k, &prev.x_post, &prev.p_post);
        states.push(kalman_update(model, k, x, p, y, form)?);
    }
    smoothing_cross_cov(model, &mut states);
    Ok(states)
}

/// Fill `Σ_{k|k-1}` for `k >= 1` by the one-lag recursion
/// `Σ_{k+1|k} = P_{k|k-1} (F_{k+1} - F_{k+1} K_k H_k)^T`.
///
/// A step without a measurement has `K_k = 0`, so the recursion starts from
/// `Σ_{1|0} = P_{0|-1} F_1^T` when `y_0` is absent.
pub fn smoothing_cross_cov(model: &LinearModel, states: &mut [KalmanState]) {
    for k in 1..states.len() {
        let prev = &states[k - 1];
        let f = model.f(k);
        let kh = if prev.observed() {
            &prev.gain * model.h(prev.k)
        } else {
            DMatrix::zeros(f.nrows(), f.ncols())
        };
        let sigma = &prev.p_pred * (f - f * kh).transpose();
        states[k].sigma_cross = Some(sigma);
    }
}

/// Fixed point of the prediction Riccati map for a time-invariant model.
pub fn riccati_steady_state(model: &LinearModel, tol: f64, max_iter: usize) -> Result<DMatrix<f64>> {
    if !model.is_time_invariant() {
        return Err(Error::Validation(
            "steady-state Riccati solution needs a time-invariant model".into(),
        ));
    }
    let (f, h, q, r) = (model.f(1), model.h(1), model.q(1), model.r(1));
    let mut p = model.p0();
    let mut change = f64::INFINITY;
    for _ in 0..max_iter {
        let s = symmetrize(&(h * &p * h.transpose() + &r));
        let chol = cholesky(&s, "innovation covariance")?;
        let hp = h * &p;
        let post = &p - hp.transpose() * chol.solve(&hp);
        let next = symmetrize(&(f * post * f.transpose() + &q));
        change = max_abs(&(&next - &p));
        p = next;
        if change < tol {
            return Ok(p);
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        last_change: change,
    })
}
