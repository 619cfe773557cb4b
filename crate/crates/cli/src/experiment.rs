//! The two reference studies, plus the building blocks the subcommands share.

use anyhow::{bail, Context, Result};
use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Map, Value};

use mlfilter::config::{Experiment, ExperimentConfig};
use mlfilter::errorcov::{omega_recursion, repeated_sampling_path, InitRule, SamplingConfig};
use mlfilter::estimator::{ml_estimate_with, MlResult};
use mlfilter::kalman::{kalman_filter, CovarianceForm, KalmanState};
use mlfilter::linalg::Noise;
use mlfilter::models::{simulate, AnyModel, StateSpace, Trajectory};
use mlfilter::particle::{pf_posterior_mean, run_particle_filter, ParticleCloud, TransitionMixture};
use mlfilter::rng::FILTER_STREAM;
use mlfilter::score::complete_information;

use crate::io::{indexed, matrix_json, Output, Table};

/// Half-width multiplier of the reported confidence band.
pub const BAND_Z: f64 = 1.96;

pub fn trajectory_for(model: &AnyModel, cfg: &ExperimentConfig) -> Result<Trajectory> {
    Ok(simulate(model, cfg.steps, cfg.seed, cfg.observe_initial)?)
}

pub fn sampling_config(cfg: &ExperimentConfig, strict: bool, keep_replicates: bool) -> SamplingConfig {
    SamplingConfig {
        replicates: cfg.replicates,
        particles: cfg.particles,
        seed: cfg.seed,
        ml: cfg.ml,
        resampling: cfg.resampling,
        init: cfg.init,
        mixture: cfg.mixture,
        strict,
        keep_replicates,
    }
}

/// Main filter run on stream `(seed, FILTER_STREAM)`; clouds for `k = 0..=K`.
pub fn filter_clouds(model: &AnyModel, traj: &Trajectory, cfg: &ExperimentConfig) -> Result<Vec<ParticleCloud>> {
    Ok(run_particle_filter(
        model,
        traj.initial_observation.as_ref(),
        &traj.observations,
        cfg.particles,
        cfg.resampling,
        cfg.seed,
        FILTER_STREAM,
    )?)
}

/// ML estimate at every `k = 1..=K` from the main filter's clouds.
pub fn ml_series(
    model: &AnyModel,
    traj: &Trajectory,
    clouds: &[ParticleCloud],
    cfg: &ExperimentConfig,
) -> Result<Vec<MlResult>> {
    (1..=traj.steps())
        .map(|k| {
            let mixture = TransitionMixture::from_source(model, &clouds[k - 1], k, cfg.mixture)?;
            let init = match cfg.init {
                InitRule::PosteriorMean => pf_posterior_mean(&clouds[k]),
                InitRule::Prediction => mixture.weighted_mean(&clouds[k - 1].weights),
            };
            let y = traj.y(k).expect("steps >= 1 are observed");
            let r = ml_estimate_with(model, &mixture, y, &init, &cfg.ml).with_context(|| format!("ML estimate at k = {k}"))?;
            if !r.converged {
                warn!("k = {k}: ML iteration stopped after {} iterations without converging", r.iterations);
            }
            Ok(r)
        })
        .collect()
}

/// Variance quantities at one step.
#[derive(Debug, Clone)]
pub struct VarianceStep {
    pub k: usize,
    pub p_hat: DMatrix<f64>,
    pub p_hat_std_error: DMatrix<f64>,
    pub i_hat: DMatrix<f64>,
    pub j_z: DMatrix<f64>,
    /// `Ω_k` after the configured number of iterations; `None` if the recursion was rejected.
    pub omega: Option<DMatrix<f64>>,
    /// `(1/M) Σ_m (x̂_{k,m} - x_k)^2` per component.
    pub sample_var: DVector<f64>,
    pub excluded: usize,
    pub clipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coverage {
    pub hits: usize,
    pub total: usize,
}

impl Coverage {
    pub fn fraction(&self) -> f64 {
        self.hits as f64 / self.total as f64
    }
}

#[derive(Debug, Clone)]
pub struct Artifacts {
    pub experiment: Experiment,
    pub trajectory: Trajectory,
    /// Present for linear models.
    pub kalman: Option<Vec<KalmanState>>,
    /// `k = 0..=K`.
    pub pf_mean: Vec<DVector<f64>>,
    /// `k = 1..=K`.
    pub ml: Vec<DVector<f64>>,
    pub ml_iterations: Vec<usize>,
    pub ml_converged: Vec<bool>,
    /// `k = 1..=K`.
    pub variance: Vec<VarianceStep>,
    /// Of the band `x̂_k ± 1.96 σ̂_k` over every step and component.
    pub coverage: Coverage,
    pub report_steps: Vec<usize>,
}

fn is_noiseless(model: &AnyModel, steps: usize) -> bool {
    let zero = |n: &Noise| matches!(n, Noise::Zero(_));
    zero(model.initial_noise())
        && (0..=steps).all(|k| zero(model.measurement_noise(k)))
        && (1..=steps).all(|k| zero(model.process_noise(k)))
}

/// Without any noise every estimator equals the deterministic path and every variance is zero.
fn noiseless_artifacts(model: &AnyModel, cfg: &ExperimentConfig) -> Result<Artifacts> {
    info!("model has no noise; writing the deterministic path");
    let traj = trajectory_for(model, cfg)?;
    let d = model.dims();
    let p = d.state;
    let zeros = DMatrix::zeros(p, p);
    let kalman = model.as_linear().map(|_| {
        traj.states
            .iter()
            .enumerate()
            .map(|(k, x)| KalmanState {
                k,
                x_pred: x.clone(),
                p_pred: zeros.clone(),
                x_post: x.clone(),
                p_post: zeros.clone(),
                gain: DMatrix::zeros(p, d.obs),
                sigma_cross: (k > 0).then(|| zeros.clone()),
                innovation: DVector::zeros(if traj.y(k).is_some() { d.obs } else { 0 }),
            })
            .collect()
    });
    let variance = (1..=cfg.steps)
        .map(|k| VarianceStep {
            k,
            p_hat: zeros.clone(),
            p_hat_std_error: zeros.clone(),
            i_hat: DMatrix::from_element(p, p, f64::NAN),
            j_z: DMatrix::from_element(p, p, f64::NAN),
            omega: Some(zeros.clone()),
            sample_var: DVector::zeros(p),
            excluded: 0,
            clipped: 0,
        })
        .collect();
    Ok(Artifacts {
        experiment: cfg.experiment,
        kalman,
        pf_mean: traj.states.clone(),
        ml: traj.states[1..].to_vec(),
        ml_iterations: vec![0; cfg.steps],
        ml_converged: vec![true; cfg.steps],
        variance,
        coverage: Coverage {
            hits: cfg.steps * p,
            total: cfg.steps * p,
        },
        report_steps: cfg.report_steps.clone(),
        trajectory: traj,
    })
}

/// Trajectory, the three estimate series, repeated-sampling variances and Ω at every step.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let model = cfg.build_model()?;
    if is_noiseless(&model, cfg.steps) {
        return noiseless_artifacts(&model, cfg);
    }
    let traj = trajectory_for(&model, cfg)?;
    let kalman = match model.as_linear() {
        Some(lin) => Some(kalman_filter(
            lin,
            traj.initial_observation.as_ref(),
            &traj.observations,
            CovarianceForm::Plain,
        )?),
        None => None,
    };
    info!("particle filter: K = {}, N = {}", cfg.steps, cfg.particles);
    let clouds = filter_clouds(&model, &traj, cfg)?;
    let pf_mean = clouds.iter().map(pf_posterior_mean).collect();
    let ml_results = ml_series(&model, &traj, &clouds, cfg)?;
    drop(clouds);
    info!("repeated sampling: M = {}", cfg.replicates);
    let steps: Vec<usize> = (1..=cfg.steps).collect();
    let cov = repeated_sampling_path(
        &model,
        traj.initial_observation.as_ref(),
        &traj.observations,
        &steps,
        &sampling_config(cfg, false, true),
    )?;
    let p = model.dims().state;
    let mut coverage = Coverage { hits: 0, total: 0 };
    let mut variance = Vec::with_capacity(cfg.steps);
    for (est, ml) in cov.into_iter().zip(&ml_results) {
        let k = est.k;
        let x = &traj.states[k];
        let j_z = complete_information(&model, k)?;
        let omega = match omega_recursion(&j_z, &est.i_hat, cfg.omega_iterations, 0.0) {
            Ok(seq) => Some(seq.last().clone()),
            Err(e) => {
                warn!("k = {k}: Ω recursion rejected: {e}");
                None
            }
        };
        let mut sample_var = DVector::zeros(p);
        let mut used = 0;
        for r in est.per_replicate.iter().filter(|r| r.converged) {
            sample_var += (&r.x_hat - x).map(|v| v * v);
            used += 1;
        }
        sample_var /= used.max(1) as f64;
        for i in 0..p {
            let sd = est.p_hat[(i, i)].max(0.0).sqrt();
            coverage.total += 1;
            if (ml.x_hat[i] - x[i]).abs() <= BAND_Z * sd {
                coverage.hits += 1;
            }
        }
        variance.push(VarianceStep {
            k,
            p_hat: est.p_hat,
            p_hat_std_error: est.p_hat_std_error,
            i_hat: est.i_hat,
            j_z,
            omega,
            sample_var,
            excluded: est.excluded,
            clipped: est.clipped,
        });
    }
    Ok(Artifacts {
        experiment: cfg.experiment,
        kalman,
        pf_mean,
        ml: ml_results.iter().map(|r| r.x_hat.clone()).collect(),
        ml_iterations: ml_results.iter().map(|r| r.iterations).collect(),
        ml_converged: ml_results.iter().map(|r| r.converged).collect(),
        variance,
        coverage,
        report_steps: cfg.report_steps.clone(),
        trajectory: traj,
    })
}

pub fn run_linear_experiment(cfg: &ExperimentConfig) -> Result<Artifacts> {
    if cfg.experiment != Experiment::LinearSs {
        bail!("expected a linear-ss config, got {}", cfg.experiment);
    }
    run_experiment(cfg)
}

pub fn run_nonlinear_experiment(cfg: &ExperimentConfig) -> Result<Artifacts> {
    if cfg.experiment != Experiment::NonlinearTanh {
        bail!("expected a nonlinear-tanh config, got {}", cfg.experiment);
    }
    run_experiment(cfg)
}

fn nan_row(n: usize) -> impl Iterator<Item = f64> {
    std::iter::repeat_n(f64::NAN, n)
}

impl Artifacts {
    pub fn state_dim(&self) -> usize {
        self.trajectory.states[0].len()
    }

    /// `k`, true state, observation, Kalman (linear only), PF mean, ML and the band.
    pub fn estimates_table(&self) -> Table {
        let p = self.state_dim();
        let q = self.trajectory.observations[0].len();
        let mut columns = vec!["k".to_string()];
        columns.extend(indexed("x", p));
        columns.extend(indexed("y", q));
        if self.kalman.is_some() {
            columns.extend(indexed("kalman", p));
        }
        columns.extend(indexed("pf", p));
        columns.extend(indexed("ml", p));
        columns.extend(indexed("lower", p));
        columns.extend(indexed("upper", p));
        let mut table = Table::new(columns);
        for (k, x) in self.trajectory.states.iter().enumerate() {
            let mut row = vec![k as f64];
            row.extend(x.iter());
            match self.trajectory.y(k) {
                Some(y) => row.extend(y.iter()),
                None => row.extend(nan_row(q)),
            }
            if let Some(ks) = &self.kalman {
                row.extend(ks[k].x_post.iter());
            }
            row.extend(self.pf_mean[k].iter());
            if k == 0 {
                row.extend(nan_row(3 * p));
            } else {
                let ml = &self.ml[k - 1];
                let v = &self.variance[k - 1];
                row.extend(ml.iter());
                let sd: Vec<f64> = (0..p).map(|i| v.p_hat[(i, i)].max(0.0).sqrt()).collect();
                row.extend((0..p).map(|i| ml[i] - BAND_Z * sd[i]));
                row.extend((0..p).map(|i| ml[i] + BAND_Z * sd[i]));
            }
            table.push(row);
        }
        table
    }

    /// `k`, diagonals of `P̂_k` and `Ω_k`, the sample variance `s²`, and `P_{k|k}` (linear only).
    pub fn variances_table(&self) -> Table {
        let p = self.state_dim();
        let mut columns = vec!["k".to_string()];
        columns.extend(indexed("p_hat", p));
        columns.extend(indexed("omega", p));
        columns.extend(indexed("s2", p));
        if self.kalman.is_some() {
            columns.extend(indexed("p_post", p));
        }
        columns.push("excluded".into());
        columns.push("clipped".into());
        let mut table = Table::new(columns);
        for v in &self.variance {
            let mut row = vec![v.k as f64];
            row.extend(v.p_hat.diagonal().iter());
            match &v.omega {
                Some(o) => row.extend(o.diagonal().iter()),
                None => row.extend(nan_row(p)),
            }
            row.extend(v.sample_var.iter());
            if let Some(ks) = &self.kalman {
                row.extend(ks[v.k].p_post.diagonal().iter());
            }
            row.push(v.excluded as f64);
            row.push(v.clipped as f64);
            table.push(row);
        }
        table
    }

    /// Full matrices at the report steps, keyed by `k`.
    pub fn matrices_json(&self) -> Value {
        let mut map = Map::new();
        for &k in &self.report_steps {
            let v = &self.variance[k - 1];
            let mut entry = Map::new();
            entry.insert("x_true".into(), json!(self.trajectory.states[k].as_slice()));
            entry.insert("ml".into(), json!(self.ml[k - 1].as_slice()));
            entry.insert("p_hat".into(), matrix_json(&v.p_hat));
            entry.insert("p_hat_std_error".into(), matrix_json(&v.p_hat_std_error));
            entry.insert("i_hat".into(), matrix_json(&v.i_hat));
            entry.insert("j_z".into(), matrix_json(&v.j_z));
            entry.insert("omega".into(), v.omega.as_ref().map_or(Value::Null, matrix_json));
            if let Some(ks) = &self.kalman {
                entry.insert("p_post".into(), matrix_json(&ks[k].p_post));
                entry.insert("x_post".into(), json!(ks[k].x_post.as_slice()));
            }
            map.insert(k.to_string(), Value::Object(entry));
        }
        Value::Object(map)
    }

    pub fn summary_json(&self) -> Value {
        json!({
            "experiment": self.experiment.to_string(),
            "steps": self.ml.len(),
            "coverage": {
                "z": BAND_Z,
                "hits": self.coverage.hits,
                "total": self.coverage.total,
                "fraction": self.coverage.fraction(),
            },
            "ml_not_converged": self.ml_converged.iter().filter(|c| !**c).count(),
            "ml_iterations_max": self.ml_iterations.iter().max(),
            "replicates_excluded": self.variance.iter().map(|v| v.excluded).sum::<usize>(),
            "eigenvalues_clipped": self.variance.iter().map(|v| v.clipped).sum::<usize>(),
        })
    }

    pub fn write(&self, out: &mut Output) -> Result<()> {
        out.table("estimates", &self.estimates_table())?;
        out.table("variances", &self.variances_table())?;
        out.json("matrices", &self.matrices_json())?;
        out.json("summary", &self.summary_json())?;
        Ok(())
    }
}
