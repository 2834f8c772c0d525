//! Guided generation: gradient descent on the sampler inputs through
//! sample → loss → adjoint → update.

use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_adjoint, AdjointOrder};
use crate::error::{ensure_len, Error, Result};
use crate::model::NoisePredictionModel;
use crate::sampler::{
    sample, sample_with_noise, Conditioning, NoiseSource, SampleKind, Trajectory,
};
use crate::schedule::{TimeGrid, VpSchedule};

/// Scalar objective on the generated sample with its exact gradient.
pub trait GuidanceLoss: Send + Sync {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn grad(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// `‖x − target‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetLoss {
    pub target: Vec<f64>,
}

impl GuidanceLoss for TargetLoss {
    fn value(&self, x: &[f64]) -> Result<f64> {
        ensure_len("sample", x.len(), self.target.len())?;
        Ok(x.iter()
            .zip(&self.target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_len("sample", x.len(), self.target.len())?;
        Ok(x.iter()
            .zip(&self.target)
            .map(|(a, b)| 2.0 * (a - b))
            .collect())
    }
}

/// `d(v, a) + d(v, b) + |d(v, a) − d(v, b)|` with Euclidean `d`: small only
/// when `v` is close to both references at once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLoss {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

fn distance_and_grad(v: &[f64], r: &[f64]) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = v.iter().zip(r).map(|(p, q)| p - q).collect();
    let d = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
    let g = if d > 0.0 {
        diff.iter().map(|x| x / d).collect()
    } else {
        vec![0.0; v.len()]
    };
    (d, g)
}

impl PairLoss {
    fn check(&self, v: &[f64]) -> Result<()> {
        ensure_len("sample", v.len(), self.a.len())?;
        ensure_len("second reference", self.b.len(), self.a.len())
    }
}

impl GuidanceLoss for PairLoss {
    fn value(&self, v: &[f64]) -> Result<f64> {
        self.check(v)?;
        let (da, _) = distance_and_grad(v, &self.a);
        let (db, _) = distance_and_grad(v, &self.b);
        Ok(da + db + (da - db).abs())
    }

    fn grad(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check(v)?;
        let (da, ga) = distance_and_grad(v, &self.a);
        let (db, gb) = distance_and_grad(v, &self.b);
        let sign = if da > db {
            1.0
        } else if da < db {
            -1.0
        } else {
            0.0
        };
        Ok(ga
            .iter()
            .zip(&gb)
            .map(|(p, q)| p + q + sign * (p - q))
            .collect())
    }
}

/// Which inputs gradient descent may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateSet {
    pub x_init: bool,
    pub z: bool,
    #[serde(default)]
    pub theta: bool,
}

impl Default for UpdateSet {
    fn default() -> Self {
        Self {
            x_init: true,
            z: true,
            theta: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeConfig {
    pub learning_rate: f64,
    pub n_opt_steps: usize,
    pub update: UpdateSet,
    pub order: AdjointOrder,
    pub kind: SampleKind,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            n_opt_steps: 50,
            update: UpdateSet::default(),
            order: AdjointOrder::First,
            kind: SampleKind::Ode,
        }
    }
}

impl OptimizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Contract(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.n_opt_steps == 0 {
            return Err(Error::Contract("n_opt_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// One row of the loss history; `step` 0 is the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub loss: f64,
    pub grad_norm_x: f64,
    pub grad_norm_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub final_sample: Vec<f64>,
    pub x_init: Vec<f64>,
    pub z: Vec<f64>,
    pub theta: Vec<f64>,
    pub history: Vec<HistoryEntry>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn at_step(step: usize, err: Error) -> Error {
    match err {
        Error::Numerical(msg) => Error::Numerical(format!("optimization step {step}: {msg}")),
        other => other,
    }
}

/// Inputs the optimizer starts from.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedInputs<'a> {
    pub grid: &'a TimeGrid,
    pub adjoint_grid: &'a TimeGrid,
    pub x_init: &'a [f64],
    pub z: &'a [f64],
    pub seed: u64,
}

/// Plain gradient descent `v ← v − lr·∂L/∂v` on every member of the update
/// set, all updated simultaneously from the same adjoint solve. SDE runs draw
/// one noise realization from `seed` and keep it for the whole loop.
pub fn guided_generate<M, L>(
    model: &M,
    schedule: &VpSchedule,
    inputs: GuidedInputs<'_>,
    loss: &L,
    config: &OptimizeConfig,
) -> Result<OptimizeResult>
where
    M: NoisePredictionModel + Clone,
    L: GuidanceLoss + ?Sized,
{
    config.validate()?;
    let GuidedInputs {
        grid,
        adjoint_grid,
        x_init,
        z,
        seed,
    } = inputs;
    ensure_len("initial latent", x_init.len(), model.dim_x())?;
    ensure_len("conditioning", z.len(), model.dim_z())?;
    let frozen_noise = match config.kind {
        SampleKind::Ode => None,
        SampleKind::Sde => {
            let mut source = NoiseSource::new(seed);
            Some(
                (0..grid.n_steps())
                    .map(|_| source.draw(model.dim_x()))
                    .collect::<Vec<_>>(),
            )
        }
    };

    let mut model = model.clone();
    let mut x = x_init.to_vec();
    let mut zv = z.to_vec();
    let mut history = Vec::with_capacity(config.n_opt_steps + 1);
    let mut final_sample = Vec::new();
    let lr = config.learning_rate;

    for step in 0..=config.n_opt_steps {
        let cond = Conditioning::Constant(zv.clone());
        let traj: Trajectory = match &frozen_noise {
            None => sample(&model, schedule, grid, &x, &cond, SampleKind::Ode, seed),
            Some(noise) => sample_with_noise(&model, schedule, grid, &x, &cond, noise, seed),
        }
        .map_err(|e| at_step(step, e))?;
        let out = traj.final_sample().to_vec();
        let value = loss.value(&out)?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "optimization step {step}: loss is {value}"
            )));
        }
        let loss_grad = loss.grad(&out)?;
        let grads = solve_adjoint(
            &model,
            schedule,
            &traj,
            &loss_grad,
            adjoint_grid,
            config.order,
            config.kind,
        )
        .map_err(|e| at_step(step, e))?;
        let (gx, gz) = (norm(&grads.a_x), norm(&grads.a_z));
        if !(gx.is_finite() && gz.is_finite()) {
            return Err(Error::Numerical(format!(
                "optimization step {step}: non-finite gradient"
            )));
        }
        history.push(HistoryEntry {
            step,
            loss: value,
            grad_norm_x: gx,
            grad_norm_z: gz,
        });
        final_sample = out;
        if step == config.n_opt_steps {
            break;
        }
        if config.update.x_init {
            for (v, g) in x.iter_mut().zip(&grads.a_x) {
                *v -= lr * g;
            }
        }
        if config.update.z {
            for (v, g) in zv.iter_mut().zip(&grads.a_z) {
                *v -= lr * g;
            }
        }
        if config.update.theta {
            let theta: Vec<f64> = model
                .theta()
                .iter()
                .zip(&grads.a_theta)
                .map(|(v, g)| v - lr * g)
                .collect();
            model = model.with_theta(&theta).map_err(|e| at_step(step, e))?;
        }
    }

    Ok(OptimizeResult {
        final_sample,
        x_init: x,
        z: zv,
        theta: model.theta(),
        history,
    })
}
