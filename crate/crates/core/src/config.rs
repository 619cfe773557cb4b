//! TOML model and experiment descriptions.
//!
//! Matrices are written as lists of rows; a bare number is accepted for a
//! `1 x 1` matrix or a length-one vector.
//!
//! ```toml
//! schema = 1
//! experiment = "linear-ss"
//! steps = 100
//!
//! [model]
//! kind = "linear"
//! f = [[0.9]]
//! h = 1.0
//! q = 0.5
//! r = 0.1
//! mu = 0.0
//! p0 = 1.0
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::errorcov::InitRule;
use crate::estimator::MlConfig;
use crate::models::{AnyModel, LinearModel, LinearSpec, NonlinearModel, Schedule};
use crate::particle::{MixtureSource, Resampling};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn to_matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        match self {
            MatrixSpec::Scalar(v) => Ok(DMatrix::from_element(1, 1, *v)),
            MatrixSpec::Rows(rows) => {
                let ncols = rows.first().map_or(0, Vec::len);
                if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
                    return Err(Error::Config(format!("`{name}` must be a nonempty rectangular list of rows")));
                }
                Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.iter().flatten().copied()))
            }
        }
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixSpec::Rows(m.row_iter().map(|r| r.iter().copied().collect()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorSpec {
    Scalar(f64),
    List(Vec<f64>),
}

impl VectorSpec {
    pub fn to_vector(&self) -> DVector<f64> {
        match self {
            VectorSpec::Scalar(v) => DVector::from_element(1, *v),
            VectorSpec::List(v) => DVector::from_column_slice(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Time-invariant linear-Gaussian model; controls may vary per step.
    Linear {
        f: MatrixSpec,
        h: MatrixSpec,
        q: MatrixSpec,
        r: MatrixSpec,
        mu: VectorSpec,
        p0: MatrixSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        g: Option<MatrixSpec>,
        /// `u_1, u_2, ...`; the last entry covers later steps.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        u: Option<Vec<VectorSpec>>,
    },
    /// `x_k = (base + modulation sin(2πk/period)) tanh(gain x_{k-1}) + v_k`.
    ModulatedTanh {
        #[serde(default = "one")]
        base: f64,
        #[serde(default = "half")]
        modulation: f64,
        #[serde(default = "twenty")]
        period: f64,
        #[serde(default = "pi")]
        gain: f64,
        h: MatrixSpec,
        q: MatrixSpec,
        r: MatrixSpec,
        mu: VectorSpec,
        p0: MatrixSpec,
    },
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn twenty() -> f64 {
    20.0
}
fn pi() -> f64 {
    PI
}

impl ModelConfig {
    pub fn build(&self) -> Result<AnyModel> {
        match self {
            ModelConfig::Linear { f, h, q, r, mu, p0, g, u } => {
                let spec = LinearSpec {
                    f: f.to_matrix("f")?.into(),
                    g: g.as_ref().map(|g| g.to_matrix("g")).transpose()?.map(Schedule::from),
                    h: h.to_matrix("h")?.into(),
                    q: q.to_matrix("q")?.into(),
                    r: r.to_matrix("r")?.into(),
                    mu: mu.to_vector(),
                    p0: p0.to_matrix("p0")?,
                    u: u.as_ref().map(|u| Schedule::PerStep(u.iter().map(VectorSpec::to_vector).collect())),
                };
                Ok(AnyModel::Linear(LinearModel::new(spec)?))
            }
            ModelConfig::ModulatedTanh {
                base,
                modulation,
                period,
                gain,
                h,
                q,
                r,
                mu,
                p0,
            } => Ok(AnyModel::Nonlinear(NonlinearModel::modulated_tanh(
                *base,
                *modulation,
                *period,
                *gain,
                h.to_matrix("h")?,
                q.to_matrix("q")?,
                r.to_matrix("r")?,
                mu.to_vector(),
                p0.to_matrix("p0")?,
            )?)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    LinearSs,
    NonlinearTanh,
    Custom,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::LinearSs => "linear-ss",
            Experiment::NonlinearTanh => "nonlinear-tanh",
            Experiment::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub experiment: Experiment,
    /// `K`.
    pub steps: usize,
    /// `N`.
    #[serde(default = "default_particles")]
    pub particles: usize,
    /// `M`.
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    /// Apply a measurement update at `k = 0`.
    #[serde(default)]
    pub observe_initial: bool,
    /// Steps whose full matrices are written out.
    #[serde(default)]
    pub report_steps: Vec<usize>,
    #[serde(default = "default_omega_iterations")]
    pub omega_iterations: usize,
    #[serde(default)]
    pub resampling: Resampling,
    #[serde(default)]
    pub init: InitRule,
    #[serde(default)]
    pub mixture: MixtureSource,
    #[serde(default)]
    pub ml: MlConfig,
    /// Model file, relative to the experiment file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
}

fn default_particles() -> usize {
    2000
}
fn default_replicates() -> usize {
    250
}
fn default_omega_iterations() -> usize {
    50
}

/// A standalone model file: `schema` plus a `[model]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema: u32,
    pub model: ModelConfig,
}

fn check_schema(schema: u32, origin: &str) -> Result<()> {
    if schema != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "{origin}: schema {schema} is not supported (expected {SCHEMA_VERSION})"
        )));
    }
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl ModelFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let file: Self = toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        check_schema(file.schema, origin)?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read(path)?, &path.display().to_string())
    }
}

impl ExperimentConfig {
    /// Parse and validate; `base` resolves a relative `model_file`.
    pub fn parse(text: &str, origin: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        check_schema(cfg.schema, origin)?;
        match (&cfg.model, &cfg.model_file) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(format!("{origin}: give either `model` or `model_file`, not both")))
            }
            (None, None) => return Err(Error::Config(format!("{origin}: missing `model` or `model_file`"))),
            (None, Some(file)) => {
                let path = match base {
                    Some(dir) if file.is_relative() => dir.join(file),
                    _ => file.clone(),
                };
                if !path.exists() {
                    return Err(Error::Config(format!("{origin}: model file {} does not exist", path.display())));
                }
                cfg.model = Some(ModelFile::load(&path)?.model);
                cfg.model_file = Some(path);
            }
            (Some(_), None) => {}
        }
        cfg.validate(origin)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read(path)?, &path.display().to_string(), path.parent())
    }

    pub fn validate(&self, origin: &str) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(format!("{origin}: {msg}")));
        if self.steps == 0 {
            return fail("`steps` must be positive");
        }
        if self.particles < 2 {
            return fail("`particles` must be at least 2");
        }
        if self.replicates < 2 {
            return fail("`replicates` must be at least 2");
        }
        if self.omega_iterations == 0 {
            return fail("`omega_iterations` must be positive");
        }
        if let Some(k) = self.report_steps.iter().find(|&&k| k == 0 || k > self.steps) {
            return fail(&format!("report step {k} outside 1..={}", self.steps));
        }
        self.ml.validate().map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        let model = self.build_model()?;
        match (self.experiment, &model) {
            (Experiment::LinearSs, AnyModel::Nonlinear(_)) => fail("linear-ss needs a linear model"),
            (Experiment::NonlinearTanh, AnyModel::Linear(_)) => fail("nonlinear-tanh needs a modulated_tanh model"),
            _ => Ok(()),
        }
    }

    pub fn build_model(&self) -> Result<AnyModel> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::Config("no model".into()))?
            .build()
    }
}
