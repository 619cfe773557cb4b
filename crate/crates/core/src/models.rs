//! State-space model families and trajectory simulation.
//!
//! Two families share the [`StateSpace`] interface used by the particle
//! filter, the score machinery and the estimators:
//!
//! * [`LinearModel`]: `x_k = F_k x_{k-1} + G_k u_k + v_k`, `y_k = H_k x_k + w_k`;
//! * [`NonlinearModel`]: `x_k = F_k(x_{k-1}, u_k) + v_k` with the same linear
//!   Gaussian measurement.
//!
//! Per-step matrices are held in a [`Schedule`]; a constant schedule is stored
//! once and broadcast over every step.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, Noise};
use crate::rng;

/// A value that is either constant in `k` or given per step.
///
/// Per-step schedules are indexed by `k` directly (entry 0 belongs to step 0)
/// and the last entry holds for every later step.
#[derive(Debug, Clone)]
pub enum Schedule<T> {
    Constant(T),
    PerStep(Vec<T>),
}

impl<T> Schedule<T> {
    pub fn at(&self, k: usize) -> &T {
        match self {
            Schedule::Constant(v) => v,
            Schedule::PerStep(v) => &v[k.min(v.len() - 1)],
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Schedule::Constant(_))
    }

    fn values(&self) -> Box<dyn Iterator<Item = &T> + '_> {
        match self {
            Schedule::Constant(v) => Box::new(std::iter::once(v)),
            Schedule::PerStep(v) => Box::new(v.iter()),
        }
    }

    fn try_map<U>(&self, mut f: impl FnMut(&T) -> Result<U>) -> Result<Schedule<U>> {
        Ok(match self {
            Schedule::Constant(v) => Schedule::Constant(f(v)?),
            Schedule::PerStep(v) => {
                if v.is_empty() {
                    return Err(Error::Validation("empty per-step schedule".into()));
                }
                Schedule::PerStep(v.iter().map(f).collect::<Result<_>>()?)
            }
        })
    }
}

impl<T> From<T> for Schedule<T> {
    fn from(v: T) -> Self {
        Schedule::Constant(v)
    }
}

/// State, observation and control dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub state: usize,
    pub obs: usize,
    pub control: usize,
}

/// Interface shared by both model families.
pub trait StateSpace: Send + Sync {
    fn dims(&self) -> Dims;

    /// Deterministic part of the transition, `E[x_k | x_{k-1}]`.
    fn transition_mean(&self, k: usize, x_prev: &DVector<f64>) -> DVector<f64>;

    /// Transition means for every column of `x_prev`.
    fn transition_means(&self, k: usize, x_prev: &DMatrix<f64>) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = x_prev
            .column_iter()
            .map(|c| self.transition_mean(k, &c.into_owned()))
            .collect();
        DMatrix::from_columns(&cols)
    }

    /// `F_k` when the transition is linear.
    fn transition_matrix(&self, _k: usize) -> Option<&DMatrix<f64>> {
        None
    }

    fn process_noise(&self, k: usize) -> &Noise;
    fn observation_matrix(&self, k: usize) -> &DMatrix<f64>;
    fn measurement_noise(&self, k: usize) -> &Noise;
    fn initial_mean(&self) -> &DVector<f64>;
    fn initial_noise(&self) -> &Noise;

    /// `∂/∂x_k log f(x_k | x_{k-1})` for Gaussian process noise.
    fn transition_log_grad(
        &self,
        k: usize,
        x: &DVector<f64>,
        x_prev: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let q = self.process_noise(k).dense("Q")?;
        Ok(-q.solve(&(x - self.transition_mean(k, x_prev))))
    }

    /// `log f(y_k | x_k)`.
    fn observation_log_density(&self, k: usize, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        let r = self.measurement_noise(k).dense("R")?;
        Ok(r.log_density(&(y - self.observation_matrix(k) * x)))
    }
}

fn check_finite(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("{name} must be finite")));
    }
    Ok(())
}

fn check_shape(name: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    check_finite(name, m)?;
    if m.shape() != (rows, cols) {
        return Err(Error::Validation(format!(
            "{name} must be {rows}x{cols}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Matrices describing a linear-Gaussian system; validated by [`LinearModel::new`].
#[derive(Debug, Clone)]
pub struct LinearSpec {
    pub f: Schedule<DMatrix<f64>>,
    /// `None` means no control input.
    pub g: Option<Schedule<DMatrix<f64>>>,
    pub h: Schedule<DMatrix<f64>>,
    pub q: Schedule<DMatrix<f64>>,
    pub r: Schedule<DMatrix<f64>>,
    pub mu: DVector<f64>,
    pub p0: DMatrix<f64>,
    /// Predetermined controls; `None` means `u_k = 0`.
    pub u: Option<Schedule<DVector<f64>>>,
}

/// Time-varying linear-Gaussian state-space model.
#[derive(Debug, Clone)]
pub struct LinearModel {
    dims: Dims,
    f: Schedule<DMatrix<f64>>,
    g: Option<Schedule<DMatrix<f64>>>,
    h: Schedule<DMatrix<f64>>,
    q: Schedule<Noise>,
    r: Schedule<Noise>,
    mu: DVector<f64>,
    p0: Noise,
    u: Option<Schedule<DVector<f64>>>,
}

impl LinearModel {
    pub fn new(spec: LinearSpec) -> Result<Self> {
        let p = spec.mu.len();
        if p == 0 {
            return Err(Error::Validation("state dimension must be positive".into()));
        }
        let q_dim = spec.h.at(0).nrows();
        for f in spec.f.values() {
            check_shape("F", f, p, p)?;
        }
        for h in spec.h.values() {
            check_shape("H", h, q_dim, p)?;
        }
        let m = match &spec.g {
            Some(g) => g.at(0).ncols(),
            None => 0,
        };
        if let Some(g) = &spec.g {
            for gm in g.values() {
                check_shape("G", gm, p, m)?;
            }
        }
        if let Some(u) = &spec.u {
            for uk in u.values() {
                if uk.len() != m {
                    return Err(Error::Validation(format!(
                        "control vectors must have length {m}, got {}",
                        uk.len()
                    )));
                }
            }
        }
        for q in spec.q.values() {
            check_shape("Q", q, p, p)?;
        }
        for r in spec.r.values() {
            check_shape("R", r, q_dim, q_dim)?;
        }
        check_shape("P0", &spec.p0, p, p)?;
        if spec.mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("mu must be finite".into()));
        }
        Ok(Self {
            dims: Dims {
                state: p,
                obs: q_dim,
                control: m,
            },
            q: spec.q.try_map(|q| Noise::new(q.clone(), "Q"))?,
            r: spec.r.try_map(|r| Noise::new(r.clone(), "R"))?,
            p0: Noise::new(spec.p0.clone(), "P0")?,
            f: spec.f,
            g: spec.g,
            h: spec.h,
            mu: spec.mu,
            u: spec.u,
        })
    }

    /// Time-invariant system without controls.
    pub fn time_invariant(
        f: DMatrix<f64>,
        h: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        mu: DVector<f64>,
        p0: DMatrix<f64>,
    ) -> Result<Self> {
        Self::new(LinearSpec {
            f: f.into(),
            g: None,
            h: h.into(),
            q: q.into(),
            r: r.into(),
            mu,
            p0,
            u: None,
        })
    }

    /// Scalar time-invariant system `x_k = f x_{k-1} + v`, `y_k = h x_k + w`.
    pub fn scalar(f: f64, h: f64, q: f64, r: f64, mu: f64, p0: f64) -> Result<Self> {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        Self::time_invariant(s(f), s(h), s(q), s(r), DVector::from_element(1, mu), s(p0))
    }

    /// The partially observed three-state benchmark: `H = [0 1 1]`, `R = 0.1`,
    /// `Q = diag(0.2, 0.3, 0.5)`, `mu = 0`, `P0 = 0.3 I`, no control.
    pub fn three_state_benchmark() -> Self {
        let f = DMatrix::from_row_slice(
            3,
            3,
            &[0.66, -1.31, -1.11, 0.07, 0.73, -0.06, 0.00, 0.08, 0.80],
        );
        let h = DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 1.0]);
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.3, 0.5]));
        let r = DMatrix::from_element(1, 1, 0.1);
        let p0 = DMatrix::identity(3, 3) * 0.3;
        Self::time_invariant(f, h, q, r, DVector::zeros(3), p0).expect("benchmark model is valid")
    }

    pub fn f(&self, k: usize) -> &DMatrix<f64> {
        self.f.at(k)
    }

    pub fn h(&self, k: usize) -> &DMatrix<f64> {
        self.h.at(k)
    }

    pub fn q(&self, k: usize) -> DMatrix<f64> {
        self.q.at(k).cov()
    }

    pub fn r(&self, k: usize) -> DMatrix<f64> {
        self.r.at(k).cov()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn p0(&self) -> DMatrix<f64> {
        self.p0.cov()
    }

    /// `G_k u_k`, zero when the model has no control input.
    pub fn control_effect(&self, k: usize) -> DVector<f64> {
        match (&self.g, &self.u) {
            (Some(g), Some(u)) => g.at(k) * u.at(k),
            _ => DVector::zeros(self.dims.state),
        }
    }

    pub fn is_time_invariant(&self) -> bool {
        self.f.is_constant()
            && self.h.is_constant()
            && self.q.is_constant()
            && self.r.is_constant()
            && self.g.as_ref().is_none_or(|g| g.is_constant())
            && self.u.as_ref().is_none_or(|u| u.is_constant())
    }
}

impl StateSpace for LinearModel {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn transition_mean(&self, k: usize, x_prev: &DVector<f64>) -> DVector<f64> {
        self.f(k) * x_prev + self.control_effect(k)
    }

    fn transition_means(&self, k: usize, x_prev: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = self.f(k) * x_prev;
        let c = self.control_effect(k);
        for mut col in out.column_iter_mut() {
            col += &c;
        }
        out
    }

    fn transition_matrix(&self, k: usize) -> Option<&DMatrix<f64>> {
        Some(self.f(k))
    }

    fn process_noise(&self, k: usize) -> &Noise {
        self.q.at(k)
    }

    fn observation_matrix(&self, k: usize) -> &DMatrix<f64> {
        self.h(k)
    }

    fn measurement_noise(&self, k: usize) -> &Noise {
        self.r.at(k)
    }

    fn initial_mean(&self) -> &DVector<f64> {
        &self.mu
    }

    fn initial_noise(&self) -> &Noise {
        &self.p0
    }
}

/// Deterministic transition map `(k, x_{k-1}, u_k) -> F_k(x_{k-1}, u_k)`.
pub type TransitionFn = dyn Fn(usize, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;

/// Nonlinear transition with additive Gaussian noise and linear Gaussian measurement.
#[derive(Clone)]
pub struct NonlinearModel {
    dims: Dims,
    transition: Arc<TransitionFn>,
    h: DMatrix<f64>,
    q: Noise,
    r: Noise,
    mu: DVector<f64>,
    p0: Noise,
    u: Option<Schedule<DVector<f64>>>,
    label: String,
}

impl fmt::Debug for NonlinearModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlinearModel")
            .field("label", &self.label)
            .field("dims", &self.dims)
            .field("h", &self.h)
            .field("q", &self.q.cov())
            .field("r", &self.r.cov())
            .finish_non_exhaustive()
    }
}

impl NonlinearModel {
    /// `controls` of `None` means `u_k` is the empty vector.
    pub fn new(
        label: impl Into<String>,
        transition: Arc<TransitionFn>,
        h: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        mu: DVector<f64>,
        p0: DMatrix<f64>,
        controls: Option<Schedule<DVector<f64>>>,
    ) -> Result<Self> {
        let p = mu.len();
        if p == 0 {
            return Err(Error::Validation("state dimension must be positive".into()));
        }
        let obs = h.nrows();
        check_shape("H", &h, obs, p)?;
        check_shape("Q", &q, p, p)?;
        check_shape("R", &r, obs, obs)?;
        check_shape("P0", &p0, p, p)?;
        let control = controls.as_ref().map_or(0, |u| u.at(0).len());
        Ok(Self {
            dims: Dims {
                state: p,
                obs,
                control,
            },
            transition,
            h,
            q: Noise::new(q, "Q")?,
            r: Noise::new(r, "R")?,
            mu,
            p0: Noise::new(p0, "P0")?,
            u: controls,
            label: label.into(),
        })
    }

    /// `x_k = (a + b sin(2πk/period)) tanh(c x_{k-1}) + v_k` applied per component.
    #[allow(clippy::too_many_arguments)]
    pub fn modulated_tanh(
        base: f64,
        modulation: f64,
        period: f64,
        gain: f64,
        h: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        mu: DVector<f64>,
        p0: DMatrix<f64>,
    ) -> Result<Self> {
        let transition = Arc::new(move |k: usize, x: &DVector<f64>, _u: &DVector<f64>| {
            let amp = base + modulation * (2.0 * PI * k as f64 / period).sin();
            x.map(|v| amp * (gain * v).tanh())
        });
        Self::new("modulated-tanh", transition, h, q, r, mu, p0, None)
    }

    /// Scalar benchmark `x_k = f_k tanh(π x_{k-1}) + v_k`, `y_k = x_k / 2 + w_k`,
    /// `f_k = 1 + 0.5 sin(2πk/20)`, `v ~ N(0, 0.2)`, `w ~ N(0, 1)`, `x_0 ~ N(0, 1)`.
    pub fn tanh_benchmark() -> Self {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        Self::modulated_tanh(
            1.0,
            0.5,
            20.0,
            PI,
            s(0.5),
            s(0.2),
            s(1.0),
            DVector::zeros(1),
            s(1.0),
        )
        .expect("benchmark model is valid")
    }

    /// Same model with the given noise covariances and initial law.
    pub fn with_noise(&self, q: DMatrix<f64>, r: DMatrix<f64>, p0: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.label.clone(),
            Arc::clone(&self.transition),
            self.h.clone(),
            q,
            r,
            self.mu.clone(),
            p0,
            self.u.clone(),
        )
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn q(&self) -> DMatrix<f64> {
        self.q.cov()
    }

    pub fn r(&self) -> DMatrix<f64> {
        self.r.cov()
    }

    fn control(&self, k: usize) -> DVector<f64> {
        self.u
            .as_ref()
            .map_or_else(|| DVector::zeros(0), |u| u.at(k).clone())
    }
}

impl StateSpace for NonlinearModel {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn transition_mean(&self, k: usize, x_prev: &DVector<f64>) -> DVector<f64> {
        (self.transition)(k, x_prev, &self.control(k))
    }

    fn process_noise(&self, _k: usize) -> &Noise {
        &self.q
    }

    fn observation_matrix(&self, _k: usize) -> &DMatrix<f64> {
        &self.h
    }

    fn measurement_noise(&self, _k: usize) -> &Noise {
        &self.r
    }

    fn initial_mean(&self) -> &DVector<f64> {
        &self.mu
    }

    fn initial_noise(&self) -> &Noise {
        &self.p0
    }
}

/// Either model family, for code driven by configuration files.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Linear(LinearModel),
    Nonlinear(NonlinearModel),
}

impl AnyModel {
    pub fn as_linear(&self) -> Option<&LinearModel> {
        match self {
            AnyModel::Linear(m) => Some(m),
            AnyModel::Nonlinear(_) => None,
        }
    }

    fn inner(&self) -> &dyn StateSpace {
        match self {
            AnyModel::Linear(m) => m,
            AnyModel::Nonlinear(m) => m,
        }
    }
}

impl StateSpace for AnyModel {
    fn dims(&self) -> Dims {
        self.inner().dims()
    }
    fn transition_mean(&self, k: usize, x_prev: &DVector<f64>) -> DVector<f64> {
        self.inner().transition_mean(k, x_prev)
    }
    fn transition_means(&self, k: usize, x_prev: &DMatrix<f64>) -> DMatrix<f64> {
        self.inner().transition_means(k, x_prev)
    }
    fn transition_matrix(&self, k: usize) -> Option<&DMatrix<f64>> {
        self.inner().transition_matrix(k)
    }
    fn process_noise(&self, k: usize) -> &Noise {
        self.inner().process_noise(k)
    }
    fn observation_matrix(&self, k: usize) -> &DMatrix<f64> {
        self.inner().observation_matrix(k)
    }
    fn measurement_noise(&self, k: usize) -> &Noise {
        self.inner().measurement_noise(k)
    }
    fn initial_mean(&self) -> &DVector<f64> {
        self.inner().initial_mean()
    }
    fn initial_noise(&self) -> &Noise {
        self.inner().initial_noise()
    }
}

/// A simulated path: `states[k] = x_k` for `k = 0..=K`, `observations[k-1] = y_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
    /// `y_0`, present when the run observes the initial state.
    pub initial_observation: Option<DVector<f64>>,
    pub seed: u64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.observations.len()
    }

    /// `y_k`, if observed.
    pub fn y(&self, k: usize) -> Option<&DVector<f64>> {
        if k == 0 {
            self.initial_observation.as_ref()
        } else {
            self.observations.get(k - 1)
        }
    }
}

/// Draw `x_0 .. x_K` and `y_1 .. y_K` (plus `y_0` when `observe_initial`).
///
/// The output is a pure function of `(model, steps, seed, observe_initial)`.
pub fn simulate<M: StateSpace + ?Sized>(
    model: &M,
    steps: usize,
    seed: u64,
    observe_initial: bool,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::Validation("simulation needs at least one step".into()));
    }
    let mut rng = rng::stream(seed, rng::TRAJECTORY_STREAM);
    let observe = |k: usize, x: &DVector<f64>, rng: &mut rng::StreamRng| {
        model.observation_matrix(k) * x + model.measurement_noise(k).sample(rng)
    };
    let x0 = model.initial_mean() + model.initial_noise().sample(&mut rng);
    let initial_observation = observe_initial.then(|| observe(0, &x0, &mut rng));
    let mut states = Vec::with_capacity(steps + 1);
    let mut observations = Vec::with_capacity(steps);
    states.push(x0);
    for k in 1..=steps {
        let x = model.transition_mean(k, &states[k - 1]) + model.process_noise(k).sample(&mut rng);
        observations.push(observe(k, &x, &mut rng));
        states.push(x);
    }
    Ok(Trajectory {
        states,
        observations,
        initial_observation,
        seed,
    })
}

/// Closed-form prior moments `(E[x_k], Cov[x_k])` of a linear model.
pub fn linear_prior_moments(model: &LinearModel, k: usize) -> (DVector<f64>, DMatrix<f64>) {
    let mut mean = model.mu().clone();
    let mut cov = model.p0();
    for j in 1..=k {
        let f = model.f(j);
        mean = f * mean + model.control_effect(j);
        cov = symmetrize(&(f * cov * f.transpose() + model.q(j)));
    }
    (mean, cov)
}
