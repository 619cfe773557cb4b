use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use mlfilter::errorcov::InitRule;
use mlfilter::estimator::Method;
use mlfilter::particle::{MixtureSource, Resampling};

#[derive(Debug, Parser)]
#[command(name = "mlfilter", version, about = "Maximum-likelihood particle filtering toolkit")]
pub struct Cli {
    /// Override the seed from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to available parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Format for tabular outputs; matrices are always JSON.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a trajectory and its observations.
    Simulate(Source),
    /// Kalman filter (linear models only).
    Kalman {
        #[command(flatten)]
        source: Source,
        /// Joseph-form covariance update.
        #[arg(long)]
        joseph: bool,
    },
    /// Bootstrap particle filter.
    Pf {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_parser = snake::<Resampling>)]
        resampling: Option<Resampling>,
        /// Write every cloud to particles.csv.
        #[arg(long)]
        dump_particles: bool,
    },
    /// ML state estimate at every step.
    Mle {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        ml: MlArgs,
        /// Write per-iteration records to mle_trace.csv.
        #[arg(long)]
        trace: bool,
    },
    /// Repeated-sampling covariance estimates.
    Cov {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        ml: MlArgs,
        /// Steps to estimate at (comma separated); defaults to the config's report steps.
        #[arg(long, value_delimiter = ',')]
        at: Vec<usize>,
        #[arg(long)]
        replicates: Option<usize>,
        /// Keep the `S S^T` term in each replicate's information.
        #[arg(long)]
        strict: bool,
        #[arg(long, value_parser = snake::<MixtureSource>)]
        mixture: Option<MixtureSource>,
    },
    /// Recursion for the inverse information from a JSON file holding `j_z` and `j_xi`.
    Omega {
        #[arg(long)]
        pair: PathBuf,
        #[arg(long, default_value_t = 50)]
        max_iter: usize,
        /// Stop early once the largest entry change drops below this.
        #[arg(long, default_value_t = 0.0)]
        tol: f64,
    },
    /// Score and observed information on a grid (scalar states).
    ScoreProbe {
        #[command(flatten)]
        source: Source,
        /// Step `k` whose likelihood is probed.
        #[arg(long)]
        step: usize,
        #[arg(long, allow_hyphen_values = true)]
        lo: f64,
        #[arg(long, allow_hyphen_values = true)]
        hi: f64,
        #[arg(long, default_value_t = 201)]
        points: usize,
    },
    /// Run a full experiment (linear-ss, nonlinear-tanh or custom).
    Experiment {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-run the command recorded in a manifest and check the output hashes.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Source {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Trajectory CSV written by `simulate`; simulated from the config when absent.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub particles: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct MlArgs {
    #[arg(long)]
    pub method: Option<Method>,
    /// Starting point: posterior-mean or prediction.
    #[arg(long, value_parser = snake::<InitRule>)]
    pub init: Option<InitRule>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub damping: Option<f64>,
}

/// Parse a unit enum through its serde name, accepting `-` for `_`.
pub fn snake<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}
