//! Maximum-likelihood recursive state estimation.
//!
//! Linear Gaussian models are filtered with [`kalman`]; general models with the
//! bootstrap filter in [`particle`]. The [`estimator`] maximizes the
//! incomplete-data likelihood `f(y_1..y_k | x_k)` using the scores in [`score`],
//! and [`errorcov`] estimates the error covariance of that maximizer.

pub mod config;
pub mod errorcov;
pub mod error;
pub mod estimator;
pub mod kalman;
pub mod linalg;
pub mod models;
pub mod particle;
pub mod rng;
pub mod score;

pub use error::{Error, Result};
pub use kalman::{kalman_filter, CovarianceForm, KalmanState};
pub use models::{AnyModel, Dims, LinearModel, LinearSpec, NonlinearModel, Schedule, StateSpace, Trajectory};
pub use particle::{ParticleCloud, Resampling, TransitionMixture};
pub use nalgebra::{DMatrix, DVector};
