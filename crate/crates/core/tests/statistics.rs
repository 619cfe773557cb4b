//! Seeded Monte Carlo checks against closed-form oracles.

mod common;

use mlfilter::errorcov::{aggregate_replicates, Replicate};
use mlfilter::estimator::{ml_estimate, ml_estimate_with, Method, MlConfig};
use mlfilter::kalman::{kalman_filter, CovarianceForm};
use mlfilter::linalg::spectral_radius;
use mlfilter::models::{linear_prior_moments, simulate, LinearModel, StateSpace};
use mlfilter::particle::{pf_posterior_mean, resample_indices, run_particle_filter, ParticleCloud, Resampling, TransitionMixture};
use mlfilter::rng::stream;
use mlfilter::score::particle_score_with;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Upper `1 - alpha` quantile of χ²(df) by the Wilson-Hilferty approximation.
fn chi_square_quantile(df: f64, z: f64) -> f64 {
    let a = 2.0 / (9.0 * df);
    df * (1.0 - a + z * a.sqrt()).powi(3)
}

#[test]
fn multinomial_counts_follow_the_weights() {
    let weights = [0.05, 0.1, 0.15, 0.2, 0.5];
    let mut counts = [0usize; 5];
    let mut rng = stream(3, 0);
    let draws = 200_000;
    for _ in 0..draws / weights.len() {
        for i in resample_indices(&weights, Resampling::Multinomial, &mut rng).unwrap() {
            counts[i] += 1;
        }
    }
    let chi2: f64 = counts
        .iter()
        .zip(weights)
        .map(|(&c, w)| {
            let e = w * draws as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    // 99.9% point of χ²(4), about 18.5
    assert!(chi2 < chi_square_quantile(4.0, 3.09), "chi2 = {chi2}");
}

#[test]
fn systematic_counts_stay_within_one_of_expectation() {
    let mut rng = stream(4, 0);
    let raw: Vec<f64> = (0..64).map(|i| 1.0 + (i % 7) as f64).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    for _ in 0..50 {
        let idx = resample_indices(&weights, Resampling::Systematic, &mut rng).unwrap();
        let mut counts = vec![0usize; weights.len()];
        for i in idx {
            counts[i] += 1;
        }
        for (c, w) in counts.iter().zip(&weights) {
            assert!((*c as f64 - w * 64.0).abs() < 1.0 + 1e-9);
        }
    }
}

#[test]
fn simulated_states_have_the_prior_moments() {
    let model = LinearModel::three_state_benchmark();
    let k = 8;
    let runs = 4000;
    let (mean, cov) = linear_prior_moments(&model, k);
    let mut sum = DVector::zeros(3);
    let mut sq = DMatrix::zeros(3, 3);
    for seed in 0..runs {
        let x = &simulate(&model, k, seed, false).unwrap().states[k];
        sum += x;
        sq += x * x.transpose();
    }
    let m = sum / runs as f64;
    let c = sq / runs as f64 - &m * m.transpose();
    for i in 0..3 {
        let se = (cov[(i, i)] / runs as f64).sqrt();
        assert!((m[i] - mean[i]).abs() < 4.0 * se, "mean {i}: {} vs {}", m[i], mean[i]);
        // var of a sample variance is about 2 σ⁴ / n
        let se_var = cov[(i, i)] * (2.0 / runs as f64).sqrt();
        assert!((c[(i, i)] - cov[(i, i)]).abs() < 4.0 * se_var);
    }
}

#[test]
fn particle_mean_tracks_the_kalman_filter() {
    let model = LinearModel::three_state_benchmark();
    let traj = simulate(&model, 40, 21, false).unwrap();
    let ks = kalman_filter(&model, None, &traj.observations, CovarianceForm::Plain).unwrap();
    let clouds = run_particle_filter(&model, None, &traj.observations, 4000, Resampling::Multinomial, 21, 1).unwrap();
    for i in 0..3 {
        let ms: f64 = (1..=40)
            .map(|k| (pf_posterior_mean(&clouds[k])[i] - ks[k].x_post[i]).powi(2))
            .sum::<f64>()
            / 40.0;
        assert!(ms.sqrt() < 0.08, "component {i}: rms {}", ms.sqrt());
    }
}

fn benchmark_mixture(k: usize, n: usize, seed: u64) -> (LinearModel, TransitionMixture, DVector<f64>, DVector<f64>) {
    let model = LinearModel::three_state_benchmark();
    let traj = simulate(&model, k, seed, false).unwrap();
    let clouds = run_particle_filter(&model, None, &traj.observations, n, Resampling::Multinomial, seed, 1).unwrap();
    let mixture = TransitionMixture::new(&model, &clouds[k - 1], k).unwrap();
    let init = pf_posterior_mean(&clouds[k]);
    (model, mixture, init, traj.observations[k - 1].clone())
}

#[test]
fn all_methods_reach_the_same_maximizer() {
    let (model, mixture, init, y) = benchmark_mixture(9, 1500, 5);
    let reference = ml_estimate_with(&model, &mixture, &y, &init, &MlConfig::with_method(Method::Newton)).unwrap();
    assert!(reference.converged);
    for method in [Method::EmGradient, Method::ClosedLinear] {
        let r = ml_estimate_with(&model, &mixture, &y, &init, &MlConfig::with_method(method)).unwrap();
        assert!(r.converged, "{method}");
        assert!((&r.x_hat - &reference.x_hat).amax() < 1e-5, "{method}: {} vs {}", r.x_hat, reference.x_hat);
    }
}

/// BHHH contracts near `x̂` only when `J_ξ ≺ 2 M_z`; here the transition
/// dominates the measurement so the information loss is large.
#[test]
fn bhhh_agrees_where_information_loss_dominates() {
    let model = LinearModel::scalar(0.9, 0.2, 0.05, 1.0, 0.0, 0.3).unwrap();
    let traj = simulate(&model, 10, 2, false).unwrap();
    let clouds = run_particle_filter(&model, None, &traj.observations, 1500, Resampling::Multinomial, 2, 1).unwrap();
    let mixture = TransitionMixture::new(&model, &clouds[9], 10).unwrap();
    let y = &traj.observations[9];
    let init = pf_posterior_mean(&clouds[10]);
    let newton = ml_estimate_with(&model, &mixture, y, &init, &MlConfig::with_method(Method::Newton)).unwrap();
    let eval = particle_score_with(&model, &mixture, &newton.x_hat, y).unwrap();
    assert!(eval.j_xi[(0, 0)] < 2.0 * eval.m_z[(0, 0)]);
    let bhhh = ml_estimate_with(&model, &mixture, y, &init, &MlConfig::with_method(Method::Bhhh)).unwrap();
    assert!(bhhh.converged);
    assert!((bhhh.x_hat[0] - newton.x_hat[0]).abs() < 1e-5);
}

#[test]
fn em_gradient_contracts_at_the_information_ratio() {
    let (model, mixture, init, y) = benchmark_mixture(12, 1500, 8);
    let newton = ml_estimate_with(&model, &mixture, &y, &init, &MlConfig::with_method(Method::Newton)).unwrap();
    let cfg = MlConfig {
        keep_trace: true,
        ..MlConfig::with_method(Method::EmGradient)
    };
    let em = ml_estimate_with(&model, &mixture, &y, &init, &cfg).unwrap();
    assert!(newton.iterations < em.iterations);
    // linear rate: errors shrink by about ρ(I - J_z^-1 J_ξ) at the maximizer
    let eval = particle_score_with(&model, &mixture, &newton.x_hat, &y).unwrap();
    let a = DMatrix::identity(3, 3) - eval.j_z.clone().cholesky().unwrap().solve(&eval.j_xi);
    let rho = spectral_radius(&a);
    let errors: Vec<f64> = em.trace.iter().map(|r| (&r.x - &newton.x_hat).norm()).collect();
    let tail: Vec<f64> = errors
        .windows(2)
        .filter(|w| w[1] > 1e-9 && w[0] > 1e-9)
        .map(|w| w[1] / w[0])
        .collect();
    let late = &tail[tail.len().saturating_sub(5)..];
    let ratio = late.iter().sum::<f64>() / late.len() as f64;
    assert!((ratio - rho).abs() < 0.05, "observed {ratio}, predicted {rho}");
    // Newton converges quadratically
    assert!(newton.iterations <= 8, "{} Newton iterations", newton.iterations);
}

/// With clouds drawn exactly from the Kalman filtering law, the averaged
/// observed information inverts to `P_{k|k}`.
#[test]
fn exact_filter_draws_recover_posterior_covariance() {
    let model = LinearModel::three_state_benchmark();
    let k = 6;
    let traj = simulate(&model, k, 31, true).unwrap();
    let ks = kalman_filter(&model, traj.initial_observation.as_ref(), &traj.observations, CovarianceForm::Plain).unwrap();
    let prev = &ks[k - 1];
    let l = prev.p_post.clone().cholesky().unwrap().l();
    let n = 2000;
    let reps: Vec<Replicate> = (0..120u64)
        .map(|m| {
            let mut rng = stream(5, m);
            let z = DMatrix::from_fn(3, n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut parts = &l * z;
            for mut c in parts.column_iter_mut() {
                c += &prev.x_post;
            }
            let cloud = ParticleCloud::from_parts(k - 1, parts, vec![1.0; n]).unwrap();
            let r = ml_estimate(&model, &cloud, k, &traj.observations[k - 1], &ks[k].x_post, &MlConfig::default()).unwrap();
            let e = &r.final_eval;
            Replicate {
                x_hat: r.x_hat.clone(),
                j_xi: &e.j_z - &e.m_z,
                converged: r.converged,
                iterations: r.iterations,
            }
        })
        .collect();
    let est = aggregate_replicates(k, reps, false).unwrap();
    let gap = (&est.p_hat - &ks[k].p_post).amax();
    assert!(gap < 0.01, "gap {gap}");
    assert!((&est.x_hat_bar - &ks[k].x_post).amax() < 0.02);
    assert_eq!(model.dims().state, 3);
}
