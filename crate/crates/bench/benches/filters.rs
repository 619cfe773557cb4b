use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mlfilter::errorcov::omega_recursion;
use mlfilter::estimator::{ml_estimate, Method, MlConfig};
use mlfilter::kalman::{kalman_filter, riccati_steady_state, CovarianceForm};
use mlfilter::particle::{pf_posterior_mean, pf_step, Resampling};
use mlfilter::rng;
use mlfilter::score::{complete_information, observation_information, particle_score};
use mlfilter_bench::{clouds, linear_fixture, tanh_fixture, SEED};

fn kalman(c: &mut Criterion) {
    let (model, traj) = linear_fixture(100);
    c.bench_function("kalman_filter_k100", |b| {
        b.iter(|| kalman_filter(&model, None, black_box(&traj.observations), CovarianceForm::Plain).unwrap())
    });
    c.bench_function("riccati_steady_state", |b| {
        b.iter(|| riccati_steady_state(black_box(&model), 1e-12, 10_000).unwrap())
    });
}

fn particle(c: &mut Criterion) {
    let (model, traj) = linear_fixture(10);
    let mut group = c.benchmark_group("pf_step");
    for n in [500usize, 2000, 8000] {
        let cs = clouds(&model, &traj, n);
        let y = &traj.observations[4];
        group.bench_with_input(BenchmarkId::from_parameter(n), &cs[4], |b, cloud| {
            let mut rng = rng::stream(SEED, 9);
            b.iter(|| pf_step(&model, cloud, Some(y), Resampling::Multinomial, &mut rng).unwrap())
        });
    }
    group.finish();
}

fn score(c: &mut Criterion) {
    let (model, traj) = linear_fixture(10);
    let cs = clouds(&model, &traj, 2000);
    let x = pf_posterior_mean(&cs[6]);
    let y = &traj.observations[5];
    c.bench_function("particle_score_n2000", |b| {
        b.iter(|| particle_score(&model, &cs[5], 6, black_box(&x), y).unwrap())
    });
}

fn estimator(c: &mut Criterion) {
    let (model, traj) = linear_fixture(10);
    let cs = clouds(&model, &traj, 2000);
    let init = pf_posterior_mean(&cs[6]);
    let y = &traj.observations[5];
    let mut group = c.benchmark_group("ml_estimate_linear");
    group.sample_size(20);
    for method in [Method::EmGradient, Method::Newton, Method::ClosedLinear] {
        let cfg = MlConfig::with_method(method);
        group.bench_function(method.name(), |b| {
            b.iter(|| ml_estimate(&model, &cs[5], 6, y, black_box(&init), &cfg).unwrap())
        });
    }
    group.finish();

    let (model, traj) = tanh_fixture(10);
    let cs = clouds(&model, &traj, 2000);
    let init = pf_posterior_mean(&cs[6]);
    let y = &traj.observations[5];
    let cfg = MlConfig::with_method(Method::ClosedNonlinear);
    c.bench_function("ml_estimate_tanh_closed", |b| {
        b.iter(|| ml_estimate(&model, &cs[5], 6, y, black_box(&init), &cfg).unwrap())
    });
}

fn omega(c: &mut Criterion) {
    let (model, _) = linear_fixture(1);
    let j_z = complete_information(&model, 1).unwrap();
    let p_ss = riccati_steady_state(&model, 1e-12, 10_000).unwrap();
    let j_xi = p_ss.try_inverse().unwrap() + observation_information(&model, 1).unwrap();
    c.bench_function("omega_recursion_50", |b| {
        b.iter(|| omega_recursion(black_box(&j_z), &j_xi, 50, 0.0).unwrap())
    });
}

criterion_group!(benches, kalman, particle, score, estimator, omega);
criterion_main!(benches);
