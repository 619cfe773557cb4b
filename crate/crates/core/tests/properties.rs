mod common;

use mlfilter::errorcov::omega_recursion;
use mlfilter::estimator::{em_gradient_update_linear, ml_estimate, Method, MlConfig};
use mlfilter::kalman::{kalman_filter, CovarianceForm};
use mlfilter::models::{simulate, StateSpace};
use mlfilter::particle::{run_particle_filter, ParticleCloud, Resampling, TransitionMixture};
use mlfilter::score::{linear_score, log_incomplete_likelihood, particle_score, particle_score_with};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use common::{max_abs, min_eig, random_linear, random_spd, rng};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

/// A random model, a trajectory through step `k`, and the filter clouds.
fn instance(seed: u64, p: usize, q: usize, k: usize, n: usize) -> (mlfilter::LinearModel, Vec<DVector<f64>>, Vec<ParticleCloud>) {
    let model = random_linear(seed, p, q);
    let traj = simulate(&model, k, seed, false).unwrap();
    let clouds = run_particle_filter(&model, None, &traj.observations, n, Resampling::Multinomial, seed, 1).unwrap();
    (model, traj.observations, clouds)
}

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn posterior_covariance_inverts_observed_information(seed in any::<u64>(), p in 1usize..=4, q in 1usize..=3, k in 1usize..=25) {
        let model = random_linear(seed, p, q);
        let traj = simulate(&model, k, seed, false).unwrap();
        let states = kalman_filter(&model, None, &traj.observations, CovarianceForm::Plain).unwrap();
        let s = &states[k];
        let eval = linear_score(&model, s, &s.x_post, &traj.observations[k - 1]).unwrap();
        let residual = max_abs(&(&eval.j_xi * &s.p_post - DMatrix::identity(p, p)));
        prop_assert!(residual < 1e-10, "residual {residual:e}");
        // the Kalman update maximizes the incomplete likelihood
        prop_assert!(eval.score.norm() < 1e-9 * (1.0 + s.x_post.norm()));
    }

    #[test]
    fn omega_increases_to_the_inverse(seed in any::<u64>(), p in 1usize..=5) {
        let mut g = rng(seed);
        let j_xi = random_spd(&mut g, p, 0.2);
        let j_z = &j_xi + random_spd(&mut g, p, 0.05);
        let seq = omega_recursion(&j_z, &j_xi, 4000, 1e-15).unwrap();
        let target = j_xi.clone().try_inverse().unwrap();
        for pair in seq.iterates.windows(2) {
            prop_assert!(min_eig(&(&pair[1] - &pair[0])) > -1e-10);
            prop_assert!(min_eig(&(&target - &pair[1])) > -1e-9);
        }
        prop_assert!(seq.spectral_radius < 1.0);
        if seq.spectral_radius < 0.99 {
            let scale = max_abs(&target);
            prop_assert!(max_abs(&(seq.last() - &target)) < 1e-8 * scale);
        }
    }

    #[test]
    fn observed_information_never_exceeds_complete(seed in any::<u64>(), p in 1usize..=3, q in 1usize..=2, k in 1usize..=6, t in -2.0f64..2.0) {
        let (model, ys, clouds) = instance(seed, p, q, k, 150);
        let center = mlfilter::particle::pf_posterior_mean(&clouds[k]);
        let x = center.map(|v| v + t);
        let eval = particle_score(&model, &clouds[k - 1], k, &x, &ys[k - 1]).unwrap();
        prop_assert!(min_eig(&(&eval.j_z - &eval.j_xi)) > -1e-10);
        let states = kalman_filter(&model, None, &ys, CovarianceForm::Plain).unwrap();
        let lin = linear_score(&model, &states[k], &x, &ys[k - 1]).unwrap();
        prop_assert!(min_eig(&(&lin.j_z - &lin.j_xi)) > -1e-10);
    }

    #[test]
    fn em_gradient_never_lowers_the_likelihood(seed in any::<u64>(), p in 1usize..=3, q in 1usize..=2, k in 1usize..=5, offset in -3.0f64..3.0) {
        let (model, ys, clouds) = instance(seed, p, q, k, 120);
        let init = mlfilter::particle::pf_posterior_mean(&clouds[k]).map(|v| v + offset);
        let cfg = MlConfig { keep_trace: true, ..MlConfig::with_method(Method::EmGradient) };
        let r = ml_estimate(&model, &clouds[k - 1], k, &ys[k - 1], &init, &cfg).unwrap();
        prop_assert_eq!(r.ascent_violations, 0);
        for w in r.trace.windows(2) {
            prop_assert!(w[1].log_likelihood >= w[0].log_likelihood - 1e-12);
        }
    }

    #[test]
    fn particle_order_is_irrelevant(seed in any::<u64>(), p in 1usize..=3, k in 1usize..=4) {
        let (model, ys, clouds) = instance(seed, p, 1, k, 80);
        let prev = &clouds[k - 1];
        let n = prev.len();
        let perm: Vec<usize> = (0..n).map(|i| (i * 37 + 11) % n).collect();
        prop_assume!({ let mut s = perm.clone(); s.sort(); s.dedup(); s.len() == n });
        let shuffled = ParticleCloud::from_parts(
            prev.k,
            DMatrix::from_fn(p, n, |r, c| prev.particles[(r, perm[c])]),
            perm.iter().map(|&i| prev.weights[i]).collect(),
        ).unwrap();
        let x = mlfilter::particle::pf_posterior_mean(&clouds[k]);
        let a = particle_score(&model, prev, k, &x, &ys[k - 1]).unwrap();
        let b = particle_score(&model, &shuffled, k, &x, &ys[k - 1]).unwrap();
        prop_assert!((&a.score - &b.score).amax() < 1e-9 * (1.0 + a.score.amax()));
        prop_assert!(max_abs(&(&a.j_xi - &b.j_xi)) < 1e-9 * (1.0 + max_abs(&a.j_xi)));
    }

    #[test]
    fn closed_linear_update_is_the_generic_step(seed in any::<u64>(), p in 1usize..=3, q in 1usize..=3, k in 1usize..=4, t in -1.0f64..1.0) {
        let (model, ys, clouds) = instance(seed, p, q, k, 100);
        let mixture = TransitionMixture::new(&model, &clouds[k - 1], k).unwrap();
        let x = mlfilter::particle::pf_posterior_mean(&clouds[k]).map(|v| v + t);
        let eval = particle_score_with(&model, &mixture, &x, &ys[k - 1]).unwrap();
        let generic = &x + eval.j_z.clone().cholesky().unwrap().solve(&eval.score);
        let closed = em_gradient_update_linear(&model, &mixture, &x, &ys[k - 1]).unwrap();
        prop_assert!((&generic - &closed).amax() < 1e-10 * (1.0 + generic.amax()));
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn score_and_information_match_finite_differences(seed in any::<u64>(), p in 1usize..=3, k in 1usize..=4, t in -1.0f64..1.0) {
        let (model, ys, clouds) = instance(seed, p, 1, k, 60);
        let mixture = TransitionMixture::new(&model, &clouds[k - 1], k).unwrap();
        let y = &ys[k - 1];
        let x = mlfilter::particle::pf_posterior_mean(&clouds[k]).map(|v| v + t);
        let ll = |z: &DVector<f64>| log_incomplete_likelihood(&model, &mixture, z, y).unwrap();
        let score = |z: &DVector<f64>| particle_score_with(&model, &mixture, z, y).unwrap().score;
        let eval = particle_score_with(&model, &mixture, &x, y).unwrap();
        let h = 1e-5;
        let dim = model.dims().state;
        for i in 0..dim {
            let mut e = DVector::zeros(dim);
            e[i] = h;
            let grad = (ll(&(&x + &e)) - ll(&(&x - &e))) / (2.0 * h);
            let scale = 1.0 + eval.score.amax();
            prop_assert!((grad - eval.score[i]).abs() < 1e-4 * scale, "grad {grad} vs {}", eval.score[i]);
            let col = (score(&(&x + &e)) - score(&(&x - &e))) / (2.0 * h);
            let hscale = 1.0 + max_abs(&eval.j_xi);
            for j in 0..dim {
                prop_assert!((-col[j] - eval.j_xi[(j, i)]).abs() < 1e-4 * hscale);
            }
        }
    }
}
