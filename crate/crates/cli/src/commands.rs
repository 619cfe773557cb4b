//! Resolved runs, their execution and manifests.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use mlfilter::config::ExperimentConfig;
use mlfilter::errorcov::{omega_recursion, repeated_sampling_path};
use mlfilter::kalman::{kalman_filter, CovarianceForm};
use mlfilter::models::{AnyModel, StateSpace, Trajectory};
use mlfilter::particle::TransitionMixture;
use mlfilter::score::{complete_information, log_incomplete_likelihood, particle_score_with};

use crate::args::{Cli, Command, Format, MlArgs, Source};
use crate::experiment::{filter_clouds, ml_series, run_experiment, sampling_config, trajectory_for};
use crate::io::{
    indexed, indexed2, matrix_from_json, matrix_json, read_trajectory, row_major, sha256_file, trajectory_table,
    Output, Table,
};

pub const MANIFEST: &str = "manifest.json";

/// A trajectory file together with the hash it had when the run was set up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputFile {
    fn new(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

/// Every parameter a run depends on; stored in the manifest and enough to repeat it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Task {
    Simulate {
        config: ExperimentConfig,
    },
    Kalman {
        config: ExperimentConfig,
        trajectory: Option<InputFile>,
        joseph: bool,
    },
    Pf {
        config: ExperimentConfig,
        trajectory: Option<InputFile>,
        dump_particles: bool,
    },
    Mle {
        config: ExperimentConfig,
        trajectory: Option<InputFile>,
        trace: bool,
    },
    Cov {
        config: ExperimentConfig,
        trajectory: Option<InputFile>,
        at: Vec<usize>,
        strict: bool,
    },
    Omega {
        j_z: Vec<Vec<f64>>,
        j_xi: Vec<Vec<f64>>,
        max_iter: usize,
        tol: f64,
    },
    ScoreProbe {
        config: ExperimentConfig,
        trajectory: Option<InputFile>,
        step: usize,
        lo: f64,
        hi: f64,
        points: usize,
    },
    Experiment {
        config: ExperimentConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub format: Format,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputHash {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub threads: usize,
    pub run: RunSpec,
    pub outputs: Vec<OutputHash>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn load_config(source: &Source, seed: Option<u64>) -> Result<(ExperimentConfig, Option<InputFile>)> {
    let mut cfg = ExperimentConfig::load(&source.config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(n) = source.particles {
        cfg.particles = n;
    }
    let trajectory = match &source.trajectory {
        Some(path) => {
            if source.steps.is_some() {
                bail!("--steps cannot be combined with --trajectory");
            }
            let model = cfg.build_model()?;
            let traj = read_trajectory(path, model.dims(), cfg.seed)?;
            cfg.steps = traj.steps();
            cfg.observe_initial = traj.initial_observation.is_some();
            Some(InputFile::new(path)?)
        }
        None => {
            if let Some(k) = source.steps {
                cfg.steps = k;
            }
            None
        }
    };
    cfg.report_steps.retain(|&k| k <= cfg.steps);
    // the model is inlined, so the recorded config stands alone
    cfg.model_file = None;
    cfg.validate(&source.config.display().to_string())?;
    Ok((cfg, trajectory))
}

fn apply_ml(cfg: &mut ExperimentConfig, ml: &MlArgs) -> Result<()> {
    if let Some(m) = ml.method {
        cfg.ml.method = m;
    }
    if let Some(init) = ml.init {
        cfg.init = init;
    }
    if let Some(e) = ml.epsilon {
        cfg.ml.epsilon = e;
    }
    if let Some(n) = ml.max_iter {
        cfg.ml.max_iter = n;
    }
    if let Some(d) = ml.damping {
        cfg.ml.damping = d;
    }
    cfg.ml.validate()?;
    Ok(())
}

/// Turn parsed arguments into a self-contained run description.
pub fn resolve(cli: &Cli) -> Result<RunSpec> {
    let task = match &cli.command {
        Command::Simulate(source) => {
            if source.trajectory.is_some() {
                bail!("simulate does not read a trajectory");
            }
            Task::Simulate {
                config: load_config(source, cli.seed)?.0,
            }
        }
        Command::Kalman { source, joseph } => {
            let (config, trajectory) = load_config(source, cli.seed)?;
            Task::Kalman {
                config,
                trajectory,
                joseph: *joseph,
            }
        }
        Command::Pf {
            source,
            resampling,
            dump_particles,
        } => {
            let (mut config, trajectory) = load_config(source, cli.seed)?;
            if let Some(r) = resampling {
                config.resampling = *r;
            }
            Task::Pf {
                config,
                trajectory,
                dump_particles: *dump_particles,
            }
        }
        Command::Mle { source, ml, trace } => {
            let (mut config, trajectory) = load_config(source, cli.seed)?;
            apply_ml(&mut config, ml)?;
            Task::Mle {
                config,
                trajectory,
                trace: *trace,
            }
        }
        Command::Cov {
            source,
            ml,
            at,
            replicates,
            strict,
            mixture,
        } => {
            let (mut config, trajectory) = load_config(source, cli.seed)?;
            apply_ml(&mut config, ml)?;
            if let Some(m) = replicates {
                if *m < 2 {
                    bail!("--replicates must be at least 2");
                }
                config.replicates = *m;
            }
            if let Some(m) = mixture {
                config.mixture = *m;
            }
            let mut at = if at.is_empty() {
                config.report_steps.clone()
            } else {
                at.clone()
            };
            if at.is_empty() {
                at = (1..=config.steps).collect();
            }
            if let Some(k) = at.iter().find(|&&k| k == 0 || k > config.steps) {
                bail!("--at step {k} outside 1..={}", config.steps);
            }
            Task::Cov {
                config,
                trajectory,
                at,
                strict: *strict,
            }
        }
        Command::Omega { pair, max_iter, tol } => {
            let text = fs::read_to_string(pair).with_context(|| format!("reading {}", pair.display()))?;
            let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", pair.display()))?;
            let j_z = matrix_from_json(&v["j_z"], "j_z")?;
            let j_xi = matrix_from_json(&v["j_xi"], "j_xi")?;
            if *max_iter == 0 {
                bail!("--max-iter must be positive");
            }
            Task::Omega {
                j_z: rows(&j_z),
                j_xi: rows(&j_xi),
                max_iter: *max_iter,
                tol: *tol,
            }
        }
        Command::ScoreProbe {
            source,
            step,
            lo,
            hi,
            points,
        } => {
            let (config, trajectory) = load_config(source, cli.seed)?;
            if *step == 0 || *step > config.steps {
                bail!("--step must lie in 1..={}", config.steps);
            }
            if !(lo < hi) || *points < 2 {
                bail!("need lo < hi and at least two points");
            }
            Task::ScoreProbe {
                config,
                trajectory,
                step: *step,
                lo: *lo,
                hi: *hi,
                points: *points,
            }
        }
        Command::Experiment { config } => {
            let mut cfg = ExperimentConfig::load(config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            cfg.model_file = None;
            Task::Experiment { config: cfg }
        }
        Command::Replay { .. } => bail!("replay is not a resolvable run"),
    };
    Ok(RunSpec {
        format: cli.format,
        task,
    })
}

fn trajectory(model: &AnyModel, cfg: &ExperimentConfig, input: &Option<InputFile>) -> Result<Trajectory> {
    match input {
        None => trajectory_for(model, cfg),
        Some(file) => {
            let hash = sha256_file(&file.path)?;
            if hash != file.sha256 {
                bail!("{} changed since the run was recorded", file.path.display());
            }
            read_trajectory(&file.path, model.dims(), cfg.seed)
        }
    }
}

fn kalman(out: &mut Output, cfg: &ExperimentConfig, input: &Option<InputFile>, joseph: bool) -> Result<()> {
    let model = cfg.build_model()?;
    let Some(lin) = model.as_linear() else {
        bail!("kalman needs a linear model");
    };
    let traj = trajectory(&model, cfg, input)?;
    let form = if joseph {
        CovarianceForm::Joseph
    } else {
        CovarianceForm::Plain
    };
    let states = kalman_filter(lin, traj.initial_observation.as_ref(), &traj.observations, form)?;
    let d = lin.dims();
    let mut columns = vec!["k".to_string()];
    columns.extend(indexed("x_pred", d.state));
    columns.extend(indexed("x_post", d.state));
    columns.extend(indexed("p_post", d.state));
    columns.extend(indexed2("gain", d.state, d.obs));
    let mut table = Table::new(columns);
    for s in &states {
        let mut row = vec![s.k as f64];
        row.extend(s.x_pred.iter());
        row.extend(s.x_post.iter());
        row.extend(s.p_post.diagonal().iter());
        row.extend(row_major(&s.gain));
        table.push(row);
    }
    out.table("kalman", &table)?;
    let mut map = Map::new();
    for &k in &cfg.report_steps {
        let s = &states[k];
        map.insert(
            k.to_string(),
            json!({
                "x_post": s.x_post.as_slice(),
                "p_pred": matrix_json(&s.p_pred),
                "p_post": matrix_json(&s.p_post),
                "gain": matrix_json(&s.gain),
                "sigma_cross": s.sigma_cross.as_ref().map_or(Value::Null, matrix_json),
            }),
        );
    }
    out.json("kalman_matrices", &Value::Object(map))?;
    Ok(())
}

fn pf(out: &mut Output, cfg: &ExperimentConfig, input: &Option<InputFile>, dump: bool) -> Result<()> {
    let model = cfg.build_model()?;
    let traj = trajectory(&model, cfg, input)?;
    let clouds = filter_clouds(&model, &traj, cfg)?;
    let p = model.dims().state;
    let mut columns = vec!["k".to_string()];
    columns.extend(indexed("mean", p));
    columns.push("ess".into());
    let mut table = Table::new(columns);
    for c in &clouds {
        let mut row = vec![c.k as f64];
        row.extend(mlfilter::particle::pf_posterior_mean(c).iter());
        row.push(c.ess);
        table.push(row);
    }
    out.table("pf", &table)?;
    if dump {
        let mut columns = vec!["k".to_string(), "n".to_string()];
        columns.extend(indexed("x", p));
        columns.push("weight".into());
        let mut table = Table::new(columns);
        for c in &clouds {
            for (n, x) in c.particles.column_iter().enumerate() {
                let mut row = vec![c.k as f64, n as f64];
                row.extend(x.iter());
                row.push(c.weights[n]);
                table.push(row);
            }
        }
        out.table("particles", &table)?;
    }
    Ok(())
}

fn mle(out: &mut Output, cfg: &ExperimentConfig, input: &Option<InputFile>, trace: bool) -> Result<()> {
    let model = cfg.build_model()?;
    let traj = trajectory(&model, cfg, input)?;
    let clouds = filter_clouds(&model, &traj, cfg)?;
    let mut cfg = cfg.clone();
    cfg.ml.keep_trace = trace;
    let results = ml_series(&model, &traj, &clouds, &cfg)?;
    let p = model.dims().state;
    let mut columns = vec!["k".to_string()];
    columns.extend(indexed("ml", p));
    columns.extend(indexed("pf", p));
    for c in ["iterations", "converged", "score_norm", "fallbacks", "ascent_violations"] {
        columns.push(c.into());
    }
    let mut table = Table::new(columns);
    for (i, r) in results.iter().enumerate() {
        let k = i + 1;
        let mut row = vec![k as f64];
        row.extend(r.x_hat.iter());
        row.extend(mlfilter::particle::pf_posterior_mean(&clouds[k]).iter());
        row.extend([
            r.iterations as f64,
            f64::from(u8::from(r.converged)),
            r.final_score_norm,
            r.fallbacks as f64,
            r.ascent_violations as f64,
        ]);
        table.push(row);
    }
    out.table("mle", &table)?;
    if trace {
        let mut columns = vec!["k".to_string(), "iteration".to_string()];
        columns.extend(indexed("x", p));
        for c in ["score_norm", "log_likelihood", "fallback"] {
            columns.push(c.into());
        }
        let mut table = Table::new(columns);
        for (i, r) in results.iter().enumerate() {
            for rec in &r.trace {
                let mut row = vec![(i + 1) as f64, rec.iteration as f64];
                row.extend(rec.x.iter());
                row.extend([rec.score_norm, rec.log_likelihood, f64::from(u8::from(rec.fallback))]);
                table.push(row);
            }
        }
        out.table("mle_trace", &table)?;
    }
    Ok(())
}

fn cov(out: &mut Output, cfg: &ExperimentConfig, input: &Option<InputFile>, at: &[usize], strict: bool) -> Result<()> {
    let model = cfg.build_model()?;
    let traj = trajectory(&model, cfg, input)?;
    let estimates = repeated_sampling_path(
        &model,
        traj.initial_observation.as_ref(),
        &traj.observations,
        at,
        &sampling_config(cfg, strict, false),
    )?;
    let kalman = match model.as_linear() {
        Some(lin) => Some(kalman_filter(
            lin,
            traj.initial_observation.as_ref(),
            &traj.observations,
            CovarianceForm::Plain,
        )?),
        None => None,
    };
    let p = model.dims().state;
    let mut columns = vec!["k".to_string()];
    columns.extend(indexed("p_hat", p));
    columns.extend(indexed("omega", p));
    if kalman.is_some() {
        columns.extend(indexed("p_post", p));
    }
    columns.push("excluded".into());
    columns.push("clipped".into());
    let mut table = Table::new(columns);
    let mut map = Map::new();
    for e in &estimates {
        let j_z = complete_information(&model, e.k)?;
        let omega = omega_recursion(&j_z, &e.i_hat, cfg.omega_iterations, 0.0)
            .map(|s| s.last().clone())
            .map_err(|err| log::warn!("k = {}: Ω recursion rejected: {err}", e.k))
            .ok();
        let mut row = vec![e.k as f64];
        row.extend(e.p_hat.diagonal().iter());
        match &omega {
            Some(o) => row.extend(o.diagonal().iter()),
            None => row.extend(std::iter::repeat_n(f64::NAN, p)),
        }
        let mut entry = json!({
            "x_hat_bar": e.x_hat_bar.as_slice(),
            "p_hat": matrix_json(&e.p_hat),
            "p_hat_std_error": matrix_json(&e.p_hat_std_error),
            "i_hat": matrix_json(&e.i_hat),
            "j_z": matrix_json(&j_z),
            "omega": omega.as_ref().map_or(Value::Null, matrix_json),
            "replicates": e.replicates,
            "excluded": e.excluded,
        });
        if let Some(ks) = &kalman {
            row.extend(ks[e.k].p_post.diagonal().iter());
            entry["p_post"] = matrix_json(&ks[e.k].p_post);
        }
        row.push(e.excluded as f64);
        row.push(e.clipped as f64);
        table.push(row);
        map.insert(e.k.to_string(), entry);
    }
    out.table("cov", &table)?;
    out.json("cov_matrices", &Value::Object(map))?;
    Ok(())
}

fn omega(out: &mut Output, j_z: &[Vec<f64>], j_xi: &[Vec<f64>], max_iter: usize, tol: f64) -> Result<()> {
    let to_m = |r: &[Vec<f64>]| DMatrix::from_fn(r.len(), r[0].len(), |i, j| r[i][j]);
    let seq = omega_recursion(&to_m(j_z), &to_m(j_xi), max_iter, tol)?;
    let p = j_z.len();
    let mut columns = vec!["l".to_string()];
    columns.extend(indexed("omega", p));
    columns.push("change".into());
    let mut table = Table::new(columns);
    for (l, o) in seq.iterates.iter().enumerate() {
        let mut row = vec![l as f64];
        row.extend(o.diagonal().iter());
        row.push(if l == 0 {
            f64::NAN
        } else {
            mlfilter::linalg::max_abs(&(o - &seq.iterates[l - 1]))
        });
        table.push(row);
    }
    out.table("omega", &table)?;
    out.json(
        "omega_summary",
        &json!({
            "iterations": seq.iterations(),
            "converged_at": seq.converged_at,
            "spectral_radius": seq.spectral_radius,
            "contraction": seq.contraction,
            "limit_residual": seq.limit_residual,
            "a": matrix_json(&seq.a),
            "b": matrix_json(&seq.b),
            "omega": matrix_json(seq.last()),
        }),
    )?;
    Ok(())
}

fn score_probe(
    out: &mut Output,
    cfg: &ExperimentConfig,
    input: &Option<InputFile>,
    step: usize,
    (lo, hi, points): (f64, f64, usize),
) -> Result<()> {
    let model = cfg.build_model()?;
    if model.dims().state != 1 {
        bail!("score-probe needs a scalar state");
    }
    let traj = trajectory(&model, cfg, input)?;
    let clouds = filter_clouds(&model, &traj, cfg)?;
    let mixture = TransitionMixture::from_source(&model, &clouds[step - 1], step, cfg.mixture)?;
    let y = traj.y(step).expect("steps >= 1 are observed");
    let mut table = Table::new(["x", "score", "j_xi", "log_likelihood"].map(String::from).to_vec());
    for i in 0..points {
        let x = DVector::from_element(1, lo + (hi - lo) * i as f64 / (points - 1) as f64);
        let eval = particle_score_with(&model, &mixture, &x, y)?;
        let ll = log_incomplete_likelihood(&model, &mixture, &x, y)?;
        table.push(vec![x[0], eval.score[0], eval.j_xi[(0, 0)], ll]);
    }
    out.table("score_probe", &table)?;
    Ok(())
}

fn command_name(task: &Task) -> &'static str {
    match task {
        Task::Simulate { .. } => "simulate",
        Task::Kalman { .. } => "kalman",
        Task::Pf { .. } => "pf",
        Task::Mle { .. } => "mle",
        Task::Cov { .. } => "cov",
        Task::Omega { .. } => "omega",
        Task::ScoreProbe { .. } => "score-probe",
        Task::Experiment { .. } => "experiment",
    }
}

/// Run `spec` into `dir` and write its manifest.
pub fn execute(spec: &RunSpec, dir: &Path) -> Result<Manifest> {
    let mut out = Output::new(dir, spec.format)?;
    info!("{} -> {}", command_name(&spec.task), dir.display());
    match &spec.task {
        Task::Simulate { config } => {
            let model = config.build_model()?;
            let traj = trajectory_for(&model, config)?;
            out.table("trajectory", &trajectory_table(&traj, model.dims()))?;
        }
        Task::Kalman {
            config,
            trajectory,
            joseph,
        } => kalman(&mut out, config, trajectory, *joseph)?,
        Task::Pf {
            config,
            trajectory,
            dump_particles,
        } => pf(&mut out, config, trajectory, *dump_particles)?,
        Task::Mle {
            config,
            trajectory,
            trace,
        } => mle(&mut out, config, trajectory, *trace)?,
        Task::Cov {
            config,
            trajectory,
            at,
            strict,
        } => cov(&mut out, config, trajectory, at, *strict)?,
        Task::Omega {
            j_z,
            j_xi,
            max_iter,
            tol,
        } => omega(&mut out, j_z, j_xi, *max_iter, *tol)?,
        Task::ScoreProbe {
            config,
            trajectory,
            step,
            lo,
            hi,
            points,
        } => score_probe(&mut out, config, trajectory, *step, (*lo, *hi, *points))?,
        Task::Experiment { config } => {
            let model = config.build_model()?;
            let art = run_experiment(config)?;
            out.table("trajectory", &trajectory_table(&art.trajectory, model.dims()))?;
            art.write(&mut out)?;
        }
    }
    let outputs = out
        .written()
        .iter()
        .map(|path| {
            Ok(OutputHash {
                file: path.file_name().expect("file").to_string_lossy().into_owned(),
                sha256: sha256_file(path)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        tool: "mlfilter".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        threads: rayon::current_num_threads(),
        run: spec.clone(),
        outputs,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(manifest)
}

/// Re-run a recorded manifest into `dir`; fails if any output hash differs.
pub fn replay(manifest_path: &Path, dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(manifest_path).with_context(|| format!("reading {}", manifest_path.display()))?;
    let recorded: Manifest =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", manifest_path.display()))?;
    if recorded.version != env!("CARGO_PKG_VERSION") {
        log::warn!("manifest written by version {}, running {}", recorded.version, env!("CARGO_PKG_VERSION"));
    }
    if let Some(cfg) = task_config(&recorded.run.task) {
        cfg.validate(&manifest_path.display().to_string())?;
    }
    let fresh = execute(&recorded.run, dir)?;
    let mismatched: Vec<&str> = recorded
        .outputs
        .iter()
        .filter(|o| !fresh.outputs.contains(o))
        .map(|o| o.file.as_str())
        .collect();
    if !mismatched.is_empty() || fresh.outputs.len() != recorded.outputs.len() {
        bail!("replayed outputs differ: {}", mismatched.join(", "));
    }
    Ok(fresh)
}

fn task_config(task: &Task) -> Option<&ExperimentConfig> {
    match task {
        Task::Simulate { config }
        | Task::Kalman { config, .. }
        | Task::Pf { config, .. }
        | Task::Mle { config, .. }
        | Task::Cov { config, .. }
        | Task::ScoreProbe { config, .. }
        | Task::Experiment { config } => Some(config),
        Task::Omega { .. } => None,
    }
}

pub fn run(cli: &Cli) -> Result<Manifest> {
    let pool = match cli.threads {
        Some(0) => bail!("--threads must be positive"),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?,
        None => rayon::ThreadPoolBuilder::new().build()?,
    };
    pool.install(|| match &cli.command {
        Command::Replay { manifest } => replay(manifest, &cli.out),
        _ => execute(&resolve(cli)?, &cli.out),
    })
}
