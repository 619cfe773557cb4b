//! Fixtures shared by the criterion benches.

use mlfilter::models::{simulate, LinearModel, NonlinearModel, Trajectory};
use mlfilter::particle::{run_particle_filter, ParticleCloud, Resampling};
use mlfilter::rng::FILTER_STREAM;

pub const SEED: u64 = 17;

pub fn linear_fixture(steps: usize) -> (LinearModel, Trajectory) {
    let model = LinearModel::three_state_benchmark();
    let traj = simulate(&model, steps, SEED, false).expect("simulate");
    (model, traj)
}

pub fn tanh_fixture(steps: usize) -> (NonlinearModel, Trajectory) {
    let model = NonlinearModel::tanh_benchmark();
    let traj = simulate(&model, steps, SEED, false).expect("simulate");
    (model, traj)
}

/// Filter clouds `0..=K` for a fixture trajectory.
pub fn clouds<M: mlfilter::StateSpace>(model: &M, traj: &Trajectory, n: usize) -> Vec<ParticleCloud> {
    run_particle_filter(model, None, &traj.observations, n, Resampling::Multinomial, SEED, FILTER_STREAM)
        .expect("particle filter")
}
