//! Error covariance of the ML state estimate.
//!
//! [`repeated_sampling_path`] draws `M` independent particle clouds, runs the
//! estimator on each and averages the observed information
//! `J_ξ^(m) = J_z - M_z` into `Î_ξ`, whose inverse is `P̂_k`.
//! [`omega_recursion`] computes `J_ξ^-1` by the monotone series
//! `Ω^{l+1} = (I - J_z^-1 J_ξ) Ω^l + J_z^-1`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{ml_estimate_with, MlConfig};
use crate::linalg::{cholesky, eigen_clip, max_abs, min_eigenvalue, spectral_radius, sym_eigenvalues, sym_spectral_norm, symmetrize};
use crate::models::StateSpace;
use crate::particle::{pf_init, pf_observe_initial, pf_posterior_mean, pf_step, MixtureSource, Resampling, TransitionMixture};
use crate::rng;

/// Eigenvalue floor used when `Î_ξ` is not positive definite.
pub const CLIP_FLOOR: f64 = 1e-10;

/// Largest fraction of replicates that may fail to converge.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.2;

/// Where each replicate's iteration starts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitRule {
    /// `E[x_k | y_1..y_k]` from the replicate's own filter.
    #[default]
    PosteriorMean,
    /// The particle prediction `Σ α F_k(x_{k-1}^n)`.
    Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// `M`.
    pub replicates: usize,
    /// `N`.
    pub particles: usize,
    pub seed: u64,
    pub ml: MlConfig,
    pub resampling: Resampling,
    pub init: InitRule,
    pub mixture: MixtureSource,
    /// Keep the `S S^T` term in `J_ξ^(m)`.
    pub strict: bool,
    pub keep_replicates: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            replicates: 250,
            particles: 2000,
            seed: 0,
            ml: MlConfig::default(),
            resampling: Resampling::Multinomial,
            init: InitRule::PosteriorMean,
            mixture: MixtureSource::default(),
            strict: false,
            keep_replicates: false,
        }
    }
}

/// One replicate's estimate at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicate {
    pub x_hat: DVector<f64>,
    pub j_xi: DMatrix<f64>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct CovEstimate {
    pub k: usize,
    /// Average of the replicate estimates.
    pub x_hat_bar: DVector<f64>,
    pub i_hat: DMatrix<f64>,
    pub p_hat: DMatrix<f64>,
    /// Monte Carlo standard errors of `P̂` entries (first-order in `Î_ξ`).
    pub p_hat_std_error: DMatrix<f64>,
    /// Replicates entering the average.
    pub replicates: usize,
    pub excluded: usize,
    /// Eigenvalues of `Î_ξ` raised to [`CLIP_FLOOR`].
    pub clipped: usize,
    pub per_replicate: Vec<Replicate>,
}

/// Average converged replicates into `Î_ξ` and invert it.
pub fn aggregate_replicates(k: usize, reps: Vec<Replicate>, keep: bool) -> Result<CovEstimate> {
    let total = reps.len();
    if total < 2 {
        return Err(Error::Validation("repeated sampling needs M >= 2".into()));
    }
    let used: Vec<&Replicate> = reps.iter().filter(|r| r.converged).collect();
    let excluded = total - used.len();
    if excluded as f64 > MAX_EXCLUDED_FRACTION * total as f64 || used.is_empty() {
        return Err(Error::TooManyExclusions { step: k, excluded, total });
    }
    if excluded > 0 {
        warn!("step {k}: {excluded} of {total} replicates did not converge and were excluded");
    }
    let m = used.len() as f64;
    let p = used[0].x_hat.len();
    let mut x_sum = DVector::zeros(p);
    let mut i_sum = DMatrix::zeros(p, p);
    for r in &used {
        x_sum += &r.x_hat;
        i_sum += &r.j_xi;
    }
    let i_hat = symmetrize(&(i_sum / m));
    let (p_hat, clipped) = match cholesky(&i_hat, "I_hat") {
        Ok(chol) => (symmetrize(&chol.inverse()), 0),
        Err(_) => {
            let (fixed, clipped) = eigen_clip(&i_hat, CLIP_FLOOR);
            warn!(
                "step {k}: averaged information is not positive definite (min eigenvalue {:e}); \
                 {clipped} eigenvalue(s) clipped to {CLIP_FLOOR:e}",
                min_eigenvalue(&i_hat)
            );
            (symmetrize(&cholesky(&fixed, "clipped I_hat")?.inverse()), clipped)
        }
    };
    // P̂ ≈ P - P (Î - I) P, so replicate m contributes P J^(m) P
    let mut first = DMatrix::zeros(p, p);
    let mut second = DMatrix::zeros(p, p);
    for r in &used {
        let z = &p_hat * &r.j_xi * &p_hat;
        second += z.component_mul(&z);
        first += z;
    }
    let mean = &first / m;
    let p_hat_std_error = if used.len() > 1 {
        (&second / m - mean.component_mul(&mean)).map(|v| (v.max(0.0) / (m - 1.0)).sqrt())
    } else {
        DMatrix::zeros(p, p)
    };
    Ok(CovEstimate {
        k,
        x_hat_bar: x_sum / m,
        i_hat,
        p_hat,
        p_hat_std_error,
        replicates: used.len(),
        excluded,
        clipped,
        per_replicate: if keep { reps } else { Vec::new() },
    })
}

fn run_replicate<M: StateSpace + ?Sized>(
    model: &M,
    y0: Option<&DVector<f64>>,
    ys: &[DVector<f64>],
    steps: &[usize],
    cfg: &SamplingConfig,
    m: usize,
) -> Result<Vec<Replicate>> {
    let mut rng = rng::stream(cfg.seed, rng::REPLICATE_BASE + m as u64);
    let mut cloud = pf_init(model, cfg.particles, &mut rng)?;
    if let Some(y0) = y0 {
        cloud = pf_observe_initial(model, &cloud, y0, cfg.resampling, &mut rng)?;
    }
    let last = *steps.iter().max().expect("nonempty steps");
    let mut out = Vec::with_capacity(steps.len());
    for k in 1..=last {
        let y = &ys[k - 1];
        let next = pf_step(model, &cloud, Some(y), cfg.resampling, &mut rng)?;
        if steps.contains(&k) {
            let mixture = TransitionMixture::from_source(model, &cloud, k, cfg.mixture)?;
            let init = match cfg.init {
                InitRule::PosteriorMean => pf_posterior_mean(&next),
                InitRule::Prediction => mixture.weighted_mean(&cloud.weights),
            };
            let r = ml_estimate_with(model, &mixture, y, &init, &cfg.ml)?;
            let e = &r.final_eval;
            let mut j_xi = &e.j_z - &e.m_z;
            if cfg.strict {
                j_xi += &e.score * e.score.transpose();
            }
            out.push(Replicate {
                x_hat: r.x_hat,
                j_xi: symmetrize(&j_xi),
                converged: r.converged,
                iterations: r.iterations,
            });
        }
        cloud = next;
    }
    Ok(out)
}

/// Repeated-sampling estimates at each step in `steps` (each `>= 1`), from one
/// observation path `y_1..y_K` (and optional `y_0`).
///
/// Replicate `m` uses RNG stream `(seed, REPLICATE_BASE + m)`, so results do not depend on the
/// number of threads.
pub fn repeated_sampling_path<M: StateSpace + ?Sized>(
    model: &M,
    y0: Option<&DVector<f64>>,
    ys: &[DVector<f64>],
    steps: &[usize],
    cfg: &SamplingConfig,
) -> Result<Vec<CovEstimate>> {
    if cfg.replicates < 2 {
        return Err(Error::Validation("repeated sampling needs M >= 2".into()));
    }
    if steps.is_empty() || steps.iter().any(|&k| k == 0 || k > ys.len()) {
        return Err(Error::Validation(format!(
            "requested steps must lie in 1..={}",
            ys.len()
        )));
    }
    let mut sorted = steps.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let per_rep: Vec<Vec<Replicate>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|m| run_replicate(model, y0, ys, &sorted, cfg, m))
        .collect::<Result<_>>()?;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let reps = per_rep.iter().map(|r| r[i].clone()).collect();
            aggregate_replicates(k, reps, cfg.keep_replicates)
        })
        .collect()
}

pub fn repeated_sampling_cov<M: StateSpace + ?Sized>(
    model: &M,
    y0: Option<&DVector<f64>>,
    ys: &[DVector<f64>],
    k: usize,
    cfg: &SamplingConfig,
) -> Result<CovEstimate> {
    Ok(repeated_sampling_path(model, y0, ys, &[k], cfg)?.remove(0))
}

#[derive(Debug, Clone)]
pub struct OmegaSequence {
    /// `Ω^0 = 0, Ω^1, ...`
    pub iterates: Vec<DMatrix<f64>>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// First `l` with `‖Ω^l - Ω^{l-1}‖_∞ < tol`.
    pub converged_at: Option<usize>,
    /// `ρ(A)`.
    pub spectral_radius: f64,
    /// Ratio of the last two increment norms.
    pub contraction: Option<f64>,
    /// `max |Ω J_ξ - I|` at the last iterate.
    pub limit_residual: f64,
}

impl OmegaSequence {
    pub fn last(&self) -> &DMatrix<f64> {
        self.iterates.last().expect("Ω^0 is always present")
    }

    pub fn iterations(&self) -> usize {
        self.iterates.len() - 1
    }
}

/// Tolerance on the minimum eigenvalue of Loewner-order differences.
pub const ORDER_SLACK: f64 = 1e-10;

/// Monotone recursion for `J_ξ^-1`; requires `J_z ⪰ J_ξ ≻ 0`.
pub fn omega_recursion(
    j_z: &DMatrix<f64>,
    j_xi: &DMatrix<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<OmegaSequence> {
    let p = j_z.nrows();
    if j_z.shape() != (p, p) || j_xi.shape() != (p, p) {
        return Err(Error::Validation("J_z and J_xi must be square and conformable".into()));
    }
    let (j_z, j_xi) = (symmetrize(j_z), symmetrize(j_xi));
    let lo = min_eigenvalue(&j_xi);
    if lo <= 0.0 {
        return Err(Error::Ordering { which: "J_xi", eigenvalue: lo });
    }
    let gap = min_eigenvalue(&(&j_z - &j_xi));
    if gap < -ORDER_SLACK {
        return Err(Error::Ordering { which: "J_z - J_xi", eigenvalue: gap });
    }
    let chol = cholesky(&j_z, "J_z")?;
    let b = symmetrize(&chol.inverse());
    let a = DMatrix::identity(p, p) - chol.solve(&j_xi);
    let rho = spectral_radius(&a);
    let mut iterates = vec![DMatrix::zeros(p, p)];
    let mut converged_at = None;
    let mut increments: Vec<f64> = Vec::new();
    for l in 1..=max_iter {
        let prev = iterates.last().expect("nonempty");
        let next = symmetrize(&(&a * prev + &b));
        let diff = &next - prev;
        let step_min = sym_eigenvalues(&symmetrize(&diff))[0];
        if step_min < -ORDER_SLACK {
            return Err(Error::Ordering {
                which: "Omega increment",
                eigenvalue: step_min,
            });
        }
        increments.push(sym_spectral_norm(&diff));
        let change = max_abs(&diff);
        iterates.push(next);
        if change < tol {
            converged_at = Some(l);
            break;
        }
    }
    let contraction = match increments.as_slice() {
        [.., a, b] if *a > 0.0 => Some(b / a),
        _ => None,
    };
    let omega = iterates.last().expect("nonempty");
    let limit_residual = max_abs(&(omega * &j_xi - DMatrix::identity(p, p)));
    Ok(OmegaSequence {
        iterates,
        a,
        b,
        converged_at,
        spectral_radius: rho,
        contraction,
        limit_residual,
    })
}

#[derive(Debug, Clone)]
pub struct EfficiencyReport {
    pub replicates: usize,
    /// Mean of `x̂ - x`.
    pub bias: DVector<f64>,
    pub bias_std_error: DVector<f64>,
    /// Sample covariance of `x̂ - x`.
    pub sample_cov: DMatrix<f64>,
    pub bound: DMatrix<f64>,
    /// Eigenvalues of `bound^-1/2 · sample_cov · bound^-T/2`; all one at full efficiency.
    pub efficiency_eigenvalues: Vec<f64>,
    /// `‖sample_cov - bound‖_F / ‖bound‖_F`.
    pub relative_gap: f64,
}

impl EfficiencyReport {
    /// Largest `|bias| / std_error` over components.
    pub fn max_bias_z(&self) -> f64 {
        self.bias
            .iter()
            .zip(self.bias_std_error.iter())
            .map(|(b, s)| if *s > 0.0 { b.abs() / s } else { 0.0 })
            .fold(0.0, f64::max)
    }
}

/// Compare estimation errors against a covariance bound (e.g. `P̂_k` or `P_{k|k}`).
pub fn crlb_efficiency_report(
    truths: &[DVector<f64>],
    estimates: &[DVector<f64>],
    bound: &DMatrix<f64>,
) -> Result<EfficiencyReport> {
    let n = truths.len();
    if n != estimates.len() {
        return Err(Error::Validation("truths and estimates differ in length".into()));
    }
    if n < 100 {
        return Err(Error::Validation("efficiency report needs at least 100 replicates".into()));
    }
    let p = bound.nrows();
    let errors: Vec<DVector<f64>> = estimates.iter().zip(truths).map(|(e, t)| e - t).collect();
    let bias = errors.iter().fold(DVector::zeros(p), |acc, e| acc + e) / n as f64;
    let sample_cov = symmetrize(
        &(errors
            .iter()
            .fold(DMatrix::zeros(p, p), |acc, e| acc + (e - &bias) * (e - &bias).transpose())
            / (n as f64 - 1.0)),
    );
    let bias_std_error = sample_cov.diagonal().map(|v| (v / n as f64).sqrt());
    let l = cholesky(bound, "covariance bound")?.l();
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::Numerical("singular bound factor".into()))?;
    let efficiency_eigenvalues = sym_eigenvalues(&symmetrize(&(&l_inv * &sample_cov * l_inv.transpose())));
    let relative_gap = (&sample_cov - bound).norm() / bound.norm();
    Ok(EfficiencyReport {
        replicates: n,
        bias,
        bias_std_error,
        sample_cov,
        bound: bound.clone(),
        efficiency_eigenvalues,
        relative_gap,
    })
}

/// Fraction of scalar intervals `estimate ± z·sd` that contain the truth.
pub fn interval_coverage(items: &[(f64, f64, f64)], z: f64) -> f64 {
    if items.is_empty() {
        return f64::NAN;
    }
    let hits = items
        .iter()
        .filter(|(truth, est, sd)| (truth - est).abs() <= z * sd)
        .count();
    hits as f64 / items.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::{kalman_filter, CovarianceForm};
    use crate::models::{simulate, LinearModel};
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn scalar_omega_is_geometric_series() {
        let s = omega_recursion(&DMatrix::from_element(1, 1, 2.0), &DMatrix::from_element(1, 1, 1.0), 30, 0.0).unwrap();
        for (l, om) in s.iterates.iter().enumerate() {
            assert_relative_eq!(om[(0, 0)], 1.0 - 0.5f64.powi(l as i32), epsilon = 1e-15);
        }
        assert_relative_eq!(s.spectral_radius, 0.5, epsilon = 1e-14);
        assert_relative_eq!(s.contraction.unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn equal_informations_converge_in_one_step() {
        let j = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let s = omega_recursion(&j, &j, 50, 1e-14).unwrap();
        let inv = j.clone().try_inverse().unwrap();
        assert!(max_abs(&(&s.iterates[1] - &inv)) < 1e-14);
        assert_eq!(s.converged_at, Some(2));
    }

    #[test]
    fn ordering_violations_are_rejected() {
        let jz = DMatrix::from_element(1, 1, 1.0);
        let e = omega_recursion(&jz, &DMatrix::from_element(1, 1, 2.0), 10, 1e-12).unwrap_err();
        assert!(matches!(e, Error::Ordering { which: "J_z - J_xi", .. }));
        let e = omega_recursion(&jz, &DMatrix::from_element(1, 1, -1.0), 10, 1e-12).unwrap_err();
        assert!(matches!(e, Error::Ordering { which: "J_xi", .. }));
    }

    #[test]
    fn identical_replicates_average_to_single_inverse() {
        let j = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let rep = Replicate {
            x_hat: DVector::from_column_slice(&[0.1, 0.2]),
            j_xi: j.clone(),
            converged: true,
            iterations: 3,
        };
        let est = aggregate_replicates(4, vec![rep.clone(), rep], false).unwrap();
        assert!(max_abs(&(&est.p_hat - j.try_inverse().unwrap())) < 1e-14);
        assert!(max_abs(&(&est.p_hat * &est.i_hat - DMatrix::identity(2, 2))) < 1e-8);
    }

    #[test]
    fn exclusions_beyond_a_fifth_fail() {
        let rep = |converged| Replicate {
            x_hat: DVector::zeros(1),
            j_xi: DMatrix::identity(1, 1),
            converged,
            iterations: 1,
        };
        let ok = aggregate_replicates(1, vec![rep(true), rep(true), rep(true), rep(true), rep(false)], false).unwrap();
        assert_eq!(ok.excluded, 1);
        let err = aggregate_replicates(1, vec![rep(true), rep(true), rep(false)], false).unwrap_err();
        assert!(matches!(err, Error::TooManyExclusions { excluded: 1, total: 3, .. }));
    }

    #[test]
    fn indefinite_average_is_clipped() {
        let rep = |v: f64| Replicate {
            x_hat: DVector::zeros(2),
            j_xi: DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, v])),
            converged: true,
            iterations: 1,
        };
        let est = aggregate_replicates(1, vec![rep(-1.0), rep(-1.0)], false).unwrap();
        assert_eq!(est.clipped, 1);
        assert!(min_eigenvalue(&est.p_hat) > 0.0);
    }

    #[test]
    fn scalar_repeated_sampling_matches_riccati() {
        let model = LinearModel::scalar(0.9, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let traj = simulate(&model, 5, 2, false).unwrap();
        let states = kalman_filter(&model, None, &traj.observations, CovarianceForm::Plain).unwrap();
        let cfg = SamplingConfig {
            replicates: 40,
            particles: 1000,
            seed: 5,
            ..SamplingConfig::default()
        };
        let est = repeated_sampling_cov(&model, None, &traj.observations, 5, &cfg).unwrap();
        let target = states[5].p_post[(0, 0)];
        let gap = (est.p_hat[(0, 0)] - target).abs();
        assert!(gap <= 4.0 * est.p_hat_std_error[(0, 0)] + 1e-3, "{gap} vs se {}", est.p_hat_std_error[(0, 0)]);
    }

    #[test]
    fn replicates_do_not_depend_on_thread_count() {
        let model = LinearModel::three_state_benchmark();
        let traj = simulate(&model, 3, 1, false).unwrap();
        let cfg = SamplingConfig {
            replicates: 6,
            particles: 200,
            seed: 9,
            ..SamplingConfig::default()
        };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| repeated_sampling_cov(&model, None, &traj.observations, 3, &cfg).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.p_hat, b.p_hat);
        assert_eq!(a.x_hat_bar, b.x_hat_bar);
    }

    #[test]
    fn efficiency_report_on_exact_gaussian_errors() {
        let bound = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let l = cholesky(&bound, "b").unwrap().l();
        let mut r = rng::stream(1, 0);
        let truths: Vec<DVector<f64>> = (0..4000).map(|_| DVector::zeros(2)).collect();
        let estimates: Vec<DVector<f64>> = (0..4000)
            .map(|_| &l * DVector::from_fn(2, |_, _| r.sample::<f64, _>(rand_distr::StandardNormal)))
            .collect();
        let rep = crlb_efficiency_report(&truths, &estimates, &bound).unwrap();
        assert!(rep.relative_gap < 0.1);
        assert!(rep.max_bias_z() < 4.0);
        for e in rep.efficiency_eigenvalues {
            assert!((e - 1.0).abs() < 0.1);
        }
        assert!(crlb_efficiency_report(&truths[..10], &estimates[..10], &bound).is_err());
    }

    #[test]
    fn coverage_counts_hits() {
        let items = [(0.0, 0.5, 1.0), (0.0, 3.0, 1.0), (1.0, 1.0, 0.0), (0.0, -1.9, 1.0)];
        assert_relative_eq!(interval_coverage(&items, 1.96), 0.75);
    }
}
