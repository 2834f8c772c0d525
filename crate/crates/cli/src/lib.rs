//! Subcommands of the `adjoint-deis` binary as plain functions.
//!
//! Each command parses a [`RunConfig`], calls the library and writes its
//! outputs; nothing here does numerical work of its own.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use adjoint_deis::{
    convergence_study, cycle_sde_invert, guided_generate, json, sample, sample_with_noise,
    sampler::max_abs_diff, solve_adjoint, solve_adjoint_scheduled_z, ConvergenceConfig, Execution,
    GuidedInputs, NoisePredictionModel, OptimizeConfig, OrderFit, SampleKind, Trajectory,
};
use serde::Serialize;

pub use config::RunConfig;

/// Cycle-SDE reconstructions above this error are reported as failures.
pub const CYCLE_TOL: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Lib(#[from] adjoint_deis::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 2 for configuration, IO and contract problems, 3 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Lib(adjoint_deis::Error::Numerical(_))
            | CliError::Lib(adjoint_deis::Error::InsufficientData(_)) => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_config(path: &Path, seed: Option<u64>) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut config = RunConfig::from_json(&text)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn out_path(config: &RunConfig, out: Option<&Path>) -> CliResult<PathBuf> {
    out.map(Path::to_path_buf)
        .or_else(|| config.output.clone())
        .ok_or_else(|| CliError::Config("no output path: pass --out or set \"output\"".into()))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn run_sample(config: &RunConfig, out: Option<&Path>) -> CliResult<Trajectory> {
    let traj = sample_trajectory(config, config.kind, None)?;
    write(&out_path(config, out)?, &json::to_string(&traj)?)?;
    Ok(traj)
}

fn sample_trajectory(
    config: &RunConfig,
    kind: SampleKind,
    n: Option<usize>,
) -> CliResult<Trajectory> {
    let schedule = config.schedule()?;
    let model = config.build_model()?;
    let grid = match n {
        Some(_) => config.grid_with(n)?,
        None => config.sampling_grid()?,
    };
    let x = config.x_init(&model);
    let z = config.conditioning(&model);
    Ok(sample(&model, &schedule, &grid, &x, &z, kind, config.seed)?)
}

/// Gradients at `t = 1`; `a_z` is one vector per knot for scheduled conditioning.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradOutput {
    pub a_x: Vec<f64>,
    pub a_z: AzOutput,
    pub a_theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum AzOutput {
    Constant(Vec<f64>),
    PerKnot(Vec<Vec<f64>>),
}

pub fn run_grad(config: &RunConfig, out: Option<&Path>) -> CliResult<GradOutput> {
    let schedule = config.schedule()?;
    let model = config.build_model()?;
    let traj = match &config.trajectory {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let traj: Trajectory = json::from_str(&text)?;
            traj.validate(&schedule, model.dim_x(), model.dim_z())?;
            traj
        }
        None => sample_trajectory(config, config.kind, None)?,
    };
    let loss_grad = config.loss()?.grad_at(traj.final_sample())?;
    let adjoint_grid = config.adjoint_grid(&traj.grid)?;
    let (order, kind) = (config.adjoint.order, config.adjoint_kind());
    let result = if traj.z_record.is_scheduled() {
        let s = solve_adjoint_scheduled_z(
            &model,
            &schedule,
            &traj,
            &loss_grad,
            &adjoint_grid,
            order,
            kind,
        )?;
        GradOutput {
            a_x: s.a_x,
            a_z: AzOutput::PerKnot(s.a_z_knots),
            a_theta: s.a_theta,
        }
    } else {
        let s = solve_adjoint(
            &model,
            &schedule,
            &traj,
            &loss_grad,
            &adjoint_grid,
            order,
            kind,
        )?;
        GradOutput {
            a_x: s.a_x,
            a_z: AzOutput::Constant(s.a_z),
            a_theta: s.a_theta,
        }
    };
    write(&out_path(config, out)?, &json::to_string(&result)?)?;
    Ok(result)
}

/// Fitted slopes of a convergence sweep; `null` for empty channels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeSummary {
    pub solver: String,
    pub kind: SampleKind,
    pub slope_ax: f64,
    pub slope_az: Option<f64>,
    pub slope_atheta: Option<f64>,
}

pub fn run_convergence(config: &RunConfig, out: Option<&Path>) -> CliResult<SlopeSummary> {
    let block = config
        .convergence
        .as_ref()
        .ok_or_else(|| CliError::Config("convergence needs a convergence block".into()))?;
    let schedule = config.schedule()?;
    let model = config.build_model()?;
    let kind = config.adjoint_kind();
    let traj = sample_trajectory(config, kind, block.n)?;
    let loss_grad = config.loss()?.grad_at(traj.final_sample())?;
    let study = ConvergenceConfig {
        m_values: block.m_values.clone(),
        reference_m: block.reference_m,
        order: block.order.unwrap_or(config.adjoint.order),
        kind,
        spacing: config.adjoint.grid_spacing,
    };
    let report = convergence_study(
        &model,
        &schedule,
        &traj,
        &loss_grad,
        &study,
        Execution::default(),
    )?;

    let path = out_path(config, out)?;
    let mut writer = csv::Writer::from_path(&path)?;
    for row in &report.rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(io_err(&path))?;

    let slope = |fit: &Option<OrderFit>| fit.as_ref().map(|f| f.slope);
    let summary = SlopeSummary {
        solver: study.order.solver_name().to_string(),
        kind,
        slope_ax: report.fit_ax.slope,
        slope_az: slope(&report.fit_az),
        slope_atheta: slope(&report.fit_atheta),
    };
    let mut slopes_path = path.into_os_string();
    slopes_path.push(".slopes.json");
    write(Path::new(&slopes_path), &json::to_string(&summary)?)?;
    Ok(summary)
}

/// Final vectors of a guided-generation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalState {
    pub final_sample: Vec<f64>,
    pub x_init: Vec<f64>,
    pub z: Vec<f64>,
    pub theta: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// `out` is a directory receiving `loss_history.csv` and `final_state.json`.
pub fn run_optimize(config: &RunConfig, out: Option<&Path>) -> CliResult<FinalState> {
    if config.z_schedule.is_some() {
        return Err(CliError::Config("optimize supports constant z only".into()));
    }
    let schedule = config.schedule()?;
    let model = config.build_model()?;
    let grid = config.sampling_grid()?;
    let adjoint_grid = config.adjoint_grid(&grid)?;
    let x = config.x_init(&model);
    let z = config.z_vector(&model);
    let loss = config.loss()?.guidance()?;
    let opt = OptimizeConfig {
        learning_rate: config.optimize.learning_rate,
        n_opt_steps: config.optimize.n_opt_steps,
        update: config.optimize.update,
        order: config.adjoint.order,
        kind: config.kind,
    };
    let inputs = GuidedInputs {
        grid: &grid,
        adjoint_grid: &adjoint_grid,
        x_init: &x,
        z: &z,
        seed: config.seed,
    };
    let result = guided_generate(&model, &schedule, inputs, loss.as_ref(), &opt)?;

    let dir = out_path(config, out)?;
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let history_path = dir.join("loss_history.csv");
    let mut writer = csv::Writer::from_path(&history_path)?;
    for entry in &result.history {
        writer.serialize(entry)?;
    }
    writer.flush().map_err(io_err(&history_path))?;

    let state = FinalState {
        initial_loss: result.history.first().map_or(f64::NAN, |h| h.loss),
        final_loss: result.history.last().map_or(f64::NAN, |h| h.loss),
        final_sample: result.final_sample,
        x_init: result.x_init,
        z: result.z,
        theta: result.theta,
    };
    write(&dir.join("final_state.json"), &json::to_string(&state)?)?;
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleReport {
    #[serde(rename = "N")]
    pub n: usize,
    pub d: usize,
    /// Largest difference between replayed and inverted states.
    pub max_state_error: f64,
    /// Largest difference between the replayed sample and the target.
    pub final_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Invert a target with Cycle-SDE, replay the recovered noise and report the
/// reconstruction error. A failed reconstruction is a numerical error.
pub fn run_cycle_check(config: &RunConfig, out: Option<&Path>) -> CliResult<CycleReport> {
    let schedule = config.schedule()?;
    let model = config.build_model()?;
    let grid = config.sampling_grid()?;
    let d = model.dim_x();
    let x = config.x_init(&model);
    let z = config.conditioning(&model);
    let target = config
        .cycle
        .as_ref()
        .and_then(|c| c.target.clone())
        .unwrap_or_else(|| adjoint_deis::gaussian_latent(d, config.seed.wrapping_add(1)));
    let inv = cycle_sde_invert(&model, &schedule, &grid, &target, &x, &z, config.seed)?;
    let replay = sample_with_noise(
        &model,
        &schedule,
        &grid,
        &x,
        &z,
        &inv.noise_seq,
        config.seed,
    )?;
    let max_state_error = max_abs_diff(&replay.states, &inv.states);
    let final_error = adjoint_deis::oracle::max_abs_error(replay.final_sample(), &target);
    let report = CycleReport {
        n: grid.n_steps(),
        d,
        max_state_error,
        final_error,
        tolerance: CYCLE_TOL,
        passed: max_state_error <= CYCLE_TOL && final_error <= CYCLE_TOL,
    };
    write(&out_path(config, out)?, &json::to_string(&report)?)?;
    if !report.passed {
        return Err(adjoint_deis::Error::Numerical(format!(
            "cycle reconstruction error {:.3e} exceeds {CYCLE_TOL:e}",
            max_state_error.max(final_error)
        ))
        .into());
    }
    Ok(report)
}
