//! Bootstrap (Kitagawa) particle filter and the transition mixture built on
//! the frozen `k-1` cloud.
//!
//! The step-`k` cloud is produced by propagating every particle with fresh
//! process noise, weighting by `f(y_k | γ_k^n)` and resampling. The
//! [`TransitionMixture`] holds `{x_{k-1}^n, α_{k-1}^n}` together with the
//! transition means `F_k(x_{k-1}^n)`; it yields the normalizing constant
//! `C(x_k) = Σ α f(x_k | x_{k-1}^n)` and the weight function `w_{k-1}^n(x_k)`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, DenseGaussian};
use crate::models::StateSpace;
use crate::rng;

/// Weighted particle approximation of `f(x_k | y_1..y_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    pub k: usize,
    /// `p x N`, one particle per column.
    pub particles: DMatrix<f64>,
    /// `α_k^n`, summing to one.
    pub weights: Vec<f64>,
    /// The step-`k-1` particle each column descends from.
    pub parents: DMatrix<f64>,
    /// `γ_k^n`, the propagated particles before resampling.
    pub candidates: DMatrix<f64>,
    /// `α_k^n` attached to `γ_k^n`.
    pub candidate_weights: Vec<f64>,
    /// Effective sample size `1 / Σ α²` of the pre-resampling weights.
    pub ess: f64,
}

impl ParticleCloud {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Cloud from explicit particles and weights (parents set to the particles).
    pub fn from_parts(k: usize, particles: DMatrix<f64>, weights: Vec<f64>) -> Result<Self> {
        if particles.ncols() != weights.len() || weights.is_empty() {
            return Err(Error::Validation(
                "particle count and weight count differ".into(),
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Validation("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Validation("weights must not all vanish".into()));
        }
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        Ok(Self {
            k,
            parents: particles.clone(),
            candidates: particles.clone(),
            candidate_weights: weights.clone(),
            particles,
            weights,
            ess,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resampling {
    #[default]
    Multinomial,
    Systematic,
}

/// Draw `N` particles from the initial law `q(x) = N(mu, P0)`.
pub fn pf_init<M: StateSpace + ?Sized, R: Rng + ?Sized>(
    model: &M,
    n: usize,
    rng: &mut R,
) -> Result<ParticleCloud> {
    if n < 2 {
        return Err(Error::Validation("particle filter needs N >= 2".into()));
    }
    let mut particles = model.initial_noise().sample_columns(n, rng);
    for mut col in particles.column_iter_mut() {
        col += model.initial_mean();
    }
    Ok(ParticleCloud {
        k: 0,
        parents: particles.clone(),
        candidates: particles.clone(),
        candidate_weights: vec![1.0 / n as f64; n],
        particles,
        weights: vec![1.0 / n as f64; n],
        ess: n as f64,
    })
}

/// Resampling indices drawn according to `weights`.
pub fn resample_indices<R: Rng + ?Sized>(
    weights: &[f64],
    scheme: Resampling,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = weights.len();
    match scheme {
        Resampling::Multinomial => {
            let dist = WeightedIndex::new(weights)
                .map_err(|e| Error::Numerical(format!("resampling weights: {e}")))?;
            Ok((0..n).map(|_| dist.sample(rng)).collect())
        }
        Resampling::Systematic => {
            let u0: f64 = rng.random::<f64>() / n as f64;
            let mut out = Vec::with_capacity(n);
            let mut cum = weights[0];
            let mut i = 0;
            for j in 0..n {
                let u = u0 + j as f64 / n as f64;
                while u > cum && i + 1 < n {
                    i += 1;
                    cum += weights[i];
                }
                out.push(i);
            }
            Ok(out)
        }
    }
}

/// Normalized weights from log-weights; errors when every term is `-inf` or NaN.
fn normalize_log_weights(step: usize, log_w: &[f64]) -> Result<Vec<f64>> {
    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Degenerate {
            step,
            max_log_likelihood: max,
        });
    }
    let unnorm: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Ok(unnorm.into_iter().map(|w| w / total).collect())
}

fn weight_and_resample<M: StateSpace + ?Sized, R: Rng + ?Sized>(
    model: &M,
    k: usize,
    candidates: DMatrix<f64>,
    ancestors: &DMatrix<f64>,
    prior_weights: &[f64],
    y: &DVector<f64>,
    scheme: Resampling,
    rng: &mut R,
) -> Result<ParticleCloud> {
    let r = model.measurement_noise(k).dense("R")?;
    let h = model.observation_matrix(k);
    let n = candidates.ncols();
    let predicted = h * &candidates;
    let log_w: Vec<f64> = (0..n)
        .map(|i| prior_weights[i].ln() + r.log_density(&(y - predicted.column(i))))
        .collect();
    let alpha = normalize_log_weights(k, &log_w)?;
    let ess = 1.0 / alpha.iter().map(|a| a * a).sum::<f64>();
    if ess < n as f64 / 10.0 {
        warn!("particle degeneracy at step {k}: ESS {ess:.1} of {n}");
    }
    let idx = resample_indices(&alpha, scheme, rng)?;
    Ok(ParticleCloud {
        k,
        particles: candidates.select_columns(&idx),
        parents: ancestors.select_columns(&idx),
        weights: vec![1.0 / n as f64; n],
        candidates,
        candidate_weights: alpha,
        ess,
    })
}

/// One filter step from the `k-1` cloud to step `k = cloud.k + 1`; `y = None`
/// propagates without a measurement.
pub fn pf_step<M: StateSpace + ?Sized, R: Rng + ?Sized>(
    model: &M,
    cloud: &ParticleCloud,
    y: Option<&DVector<f64>>,
    scheme: Resampling,
    rng: &mut R,
) -> Result<ParticleCloud> {
    let k = cloud.k + 1;
    let n = cloud.len();
    let mut gamma = model.transition_means(k, &cloud.particles);
    gamma += model.process_noise(k).sample_columns(n, rng);
    match y {
        Some(y) => weight_and_resample(model, k, gamma, &cloud.particles, &cloud.weights, y, scheme, rng),
        None => Ok(ParticleCloud {
            k,
            candidates: gamma.clone(),
            candidate_weights: cloud.weights.clone(),
            particles: gamma,
            parents: cloud.particles.clone(),
            weights: cloud.weights.clone(),
            ess: cloud.ess,
        }),
    }
}

/// Measurement update of the initial cloud with `y_0`.
pub fn pf_observe_initial<M: StateSpace + ?Sized, R: Rng + ?Sized>(
    model: &M,
    cloud: &ParticleCloud,
    y0: &DVector<f64>,
    scheme: Resampling,
    rng: &mut R,
) -> Result<ParticleCloud> {
    weight_and_resample(
        model,
        cloud.k,
        cloud.particles.clone(),
        &cloud.parents,
        &cloud.weights,
        y0,
        scheme,
        rng,
    )
}

/// `Σ_n α^n x^n`.
pub fn pf_posterior_mean(cloud: &ParticleCloud) -> DVector<f64> {
    let w = DVector::from_column_slice(&cloud.weights);
    &cloud.particles * w
}

/// Run the filter over a whole observation path; returns clouds for `k = 0..=K`.
pub fn run_particle_filter<M: StateSpace + ?Sized>(
    model: &M,
    y0: Option<&DVector<f64>>,
    ys: &[DVector<f64>],
    n: usize,
    scheme: Resampling,
    seed: u64,
    stream: u64,
) -> Result<Vec<ParticleCloud>> {
    let mut rng = rng::stream(seed, stream);
    let mut cloud = pf_init(model, n, &mut rng)?;
    if let Some(y0) = y0 {
        cloud = pf_observe_initial(model, &cloud, y0, scheme, &mut rng)?;
    }
    let mut clouds = Vec::with_capacity(ys.len() + 1);
    clouds.push(cloud);
    for y in ys {
        let next = pf_step(model, clouds.last().expect("nonempty"), Some(y), scheme, &mut rng)?;
        clouds.push(next);
    }
    Ok(clouds)
}

/// Which representation of the `k-1` filtering law the mixture is built on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureSource {
    /// Resampled particles `x_{k-1}^n` with uniform weights.
    #[default]
    Resampled,
    /// Pre-resampling particles `γ_{k-1}^n` with their weights `α_{k-1}^n`.
    Weighted,
}

/// The frozen `k-1` cloud pushed through the step-`k` transition.
///
/// Component `n` is `α_{k-1}^n N(x_k; F_k(x_{k-1}^n), Q_k)`.
#[derive(Debug, Clone)]
pub struct TransitionMixture {
    k: usize,
    parents: DMatrix<f64>,
    means: DMatrix<f64>,
    whitened_means: DMatrix<f64>,
    log_alpha: Vec<f64>,
    q: DenseGaussian,
}

impl TransitionMixture {
    /// `cloud` must be the filtering cloud at step `k - 1`.
    pub fn new<M: StateSpace + ?Sized>(model: &M, cloud: &ParticleCloud, k: usize) -> Result<Self> {
        Self::from_source(model, cloud, k, MixtureSource::default())
    }

    pub fn from_source<M: StateSpace + ?Sized>(
        model: &M,
        cloud: &ParticleCloud,
        k: usize,
        source: MixtureSource,
    ) -> Result<Self> {
        let (support, weights) = match source {
            MixtureSource::Resampled => (&cloud.particles, &cloud.weights),
            MixtureSource::Weighted => (&cloud.candidates, &cloud.candidate_weights),
        };
        let q = model.process_noise(k).dense("Q")?.clone();
        let means = model.transition_means(k, support);
        Ok(Self {
            k,
            whitened_means: q.whiten_matrix(&means),
            parents: support.clone(),
            means,
            log_alpha: weights.iter().map(|w| w.ln()).collect(),
            q,
        })
    }

    pub fn step(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_alpha.is_empty()
    }

    /// `x_{k-1}^n` as columns.
    pub fn parents(&self) -> &DMatrix<f64> {
        &self.parents
    }

    /// `F_k(x_{k-1}^n, u_k)` as columns.
    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    pub fn process_noise(&self) -> &DenseGaussian {
        &self.q
    }

    /// `log α^n + log f(x | x_{k-1}^n)` for every `n`.
    pub fn log_terms(&self, x: &DVector<f64>) -> Vec<f64> {
        let wx = self.q.whiten(x);
        let base = self.q.log_norm();
        self.whitened_means
            .column_iter()
            .zip(&self.log_alpha)
            .map(|(m, la)| la + base - 0.5 * (&wx - m).norm_squared())
            .collect()
    }

    /// `log C(x) = log Σ α^n f(x | x_{k-1}^n)`; `-inf` if every term underflows.
    pub fn log_normalizing_constant(&self, x: &DVector<f64>) -> f64 {
        let lc = log_sum_exp(&self.log_terms(x));
        if !lc.is_finite() {
            warn!("normalizing constant underflowed at step {}", self.k);
        }
        lc
    }

    /// `w_{k-1}^n(x)`, normalized.
    pub fn weights(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        normalize_log_weights(self.k, &self.log_terms(x))
    }

    /// `Σ_n w^n F_k(x_{k-1}^n)`.
    pub fn weighted_mean(&self, w: &[f64]) -> DVector<f64> {
        &self.means * DVector::from_column_slice(w)
    }

    /// `Σ_n w^n x_{k-1}^n`.
    pub fn weighted_parent_mean(&self, w: &[f64]) -> DVector<f64> {
        &self.parents * DVector::from_column_slice(w)
    }
}

/// `log C(x_k)` for the `k-1` cloud; the cloud may hold a single particle.
pub fn log_normalizing_constant<M: StateSpace + ?Sized>(
    model: &M,
    cloud: &ParticleCloud,
    k: usize,
    x: &DVector<f64>,
) -> Result<f64> {
    Ok(TransitionMixture::new(model, cloud, k)?.log_normalizing_constant(x))
}

/// `w_{k-1}^n(x_k) = α^n f(x_k | x_{k-1}^n) / C(x_k)`.
pub fn weight_function<M: StateSpace + ?Sized>(
    model: &M,
    cloud: &ParticleCloud,
    k: usize,
    x: &DVector<f64>,
) -> Result<Vec<f64>> {
    TransitionMixture::new(model, cloud, k)?.weights(x)
}
