//! Run configuration read from a JSON file. Unknown keys are rejected.

use std::path::PathBuf;

use adjoint_deis::{
    gaussian_latent, AdjointOrder, AnalyticGaussianModel, AnyModel, Conditioning, Error,
    GuidanceLoss, NoisePredictionModel, PairLoss, Result, SampleKind, SpacingRule, TargetLoss,
    TimeGrid, TinyMlpModel, UpdateSet, VpSchedule,
};
use serde::Deserialize;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub schedule: VpSchedule,
    pub model: ModelConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub kind: SampleKind,
    #[serde(default)]
    pub adjoint: AdjointConfig,
    #[serde(default)]
    pub optimize: OptimizeBlock,
    pub loss: Option<LossConfig>,
    pub convergence: Option<ConvergenceBlock>,
    pub cycle: Option<CycleBlock>,
    /// Initial latent at `t = 1`; drawn from `seed` when absent.
    pub x_init: Option<Vec<f64>>,
    /// Constant conditioning; defaults to `mu` for the Gaussian model and zeros otherwise.
    pub z: Option<Vec<f64>>,
    /// One conditioning knot per sampling interval, in grid order.
    pub z_schedule: Option<Vec<Vec<f64>>>,
    /// Trajectory file consumed by `grad`; a fresh trajectory is sampled when absent.
    pub trajectory: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelConfig {
    Gaussian {
        mu: Vec<f64>,
        #[serde(default = "default_c")]
        c: f64,
    },
    Mlp {
        d: usize,
        #[serde(default)]
        dim_z: usize,
        #[serde(default = "default_hidden")]
        hidden: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_init_scale")]
        init_scale: f64,
        /// Flat parameter vector; random initialization when absent.
        params: Option<Vec<f64>>,
    },
}

fn default_c() -> f64 {
    1.0
}

fn default_hidden() -> usize {
    16
}

fn default_init_scale() -> f64 {
    TinyMlpModel::DEFAULT_INIT_SCALE
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: Option<usize>,
    #[serde(default)]
    pub spacing: SpacingRule,
    /// Overrides `schedule.t_eps`.
    pub t_eps: Option<f64>,
    /// Explicit increasing times; takes precedence over `n` and `spacing`.
    pub times: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjointConfig {
    #[serde(default)]
    pub order: AdjointOrder,
    /// Adjoint step count; the sampling grid is reused when absent.
    #[serde(rename = "M")]
    pub m: Option<usize>,
    /// Adjoint kind; defaults to the sampling kind.
    pub kind: Option<SampleKind>,
    #[serde(default = "default_spacing")]
    pub grid_spacing: SpacingRule,
}

fn default_spacing() -> SpacingRule {
    SpacingRule::UniformLambda
}

impl Default for AdjointConfig {
    fn default() -> Self {
        Self {
            order: AdjointOrder::First,
            m: None,
            kind: None,
            grid_spacing: default_spacing(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeBlock {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_steps")]
    pub n_opt_steps: usize,
    #[serde(default)]
    pub update: UpdateSet,
}

fn default_lr() -> f64 {
    0.01
}

fn default_steps() -> usize {
    50
}

impl Default for OptimizeBlock {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            n_opt_steps: default_steps(),
            update: UpdateSet::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum LossConfig {
    /// Squared distance to `target`.
    Target { target: Vec<f64> },
    /// Symmetric two-target loss.
    Pair { a: Vec<f64>, b: Vec<f64> },
    /// Fixed cotangent `∂L/∂x` at the final sample, i.e. a linear loss.
    Gradient { grad: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceBlock {
    #[serde(rename = "M_values")]
    pub m_values: Vec<usize>,
    #[serde(rename = "reference_M", default = "default_reference")]
    pub reference_m: usize,
    /// Trajectory step count; defaults to the grid's `n`.
    #[serde(rename = "N")]
    pub n: Option<usize>,
    /// Defaults to `adjoint.order`.
    pub order: Option<AdjointOrder>,
}

fn default_reference() -> usize {
    4096
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleBlock {
    /// Clean sample to invert; drawn from `seed + 1` when absent.
    pub target: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.build_model()?;
        self.sampling_grid()?;
        if self.z.is_some() && self.z_schedule.is_some() {
            return Err(Error::Contract(
                "set at most one of z and z_schedule".into(),
            ));
        }
        if self.grid.times.is_none() && self.grid.n.is_none() {
            return Err(Error::Contract("grid needs either n or times".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<VpSchedule> {
        let t_eps = self.grid.t_eps.unwrap_or(self.schedule.t_eps);
        VpSchedule::new(self.schedule.beta0, self.schedule.beta1, t_eps)
    }

    pub fn build_model(&self) -> Result<AnyModel> {
        let schedule = self.schedule()?;
        Ok(match &self.model {
            ModelConfig::Gaussian { mu, c } => {
                AnyModel::Gaussian(AnalyticGaussianModel::new(schedule, mu.clone(), *c)?)
            }
            ModelConfig::Mlp {
                d,
                dim_z,
                hidden,
                seed,
                init_scale,
                params,
            } => AnyModel::Mlp(match params {
                Some(p) => TinyMlpModel::from_params(schedule, *d, *dim_z, *hidden, p.clone())?,
                None => TinyMlpModel::random(schedule, *d, *dim_z, *hidden, *seed, *init_scale)?,
            }),
        })
    }

    pub fn sampling_grid(&self) -> Result<TimeGrid> {
        self.grid_with(self.grid.n)
    }

    /// Sampling grid with the step count replaced by `n` (explicit times win).
    pub fn grid_with(&self, n: Option<usize>) -> Result<TimeGrid> {
        let schedule = self.schedule()?;
        match (&self.grid.times, n) {
            (Some(times), _) => TimeGrid::from_times(times.clone(), &schedule),
            (None, Some(n)) => TimeGrid::uniform(&schedule, n, self.grid.spacing),
            (None, None) => Err(Error::Contract("grid needs either n or times".into())),
        }
    }

    pub fn adjoint_grid(&self, sampling: &TimeGrid) -> Result<TimeGrid> {
        match self.adjoint.m {
            Some(m) => TimeGrid::uniform(&self.schedule()?, m, self.adjoint.grid_spacing),
            None => Ok(sampling.clone()),
        }
    }

    pub fn adjoint_kind(&self) -> SampleKind {
        self.adjoint.kind.unwrap_or(self.kind)
    }

    pub fn x_init(&self, model: &AnyModel) -> Vec<f64> {
        self.x_init
            .clone()
            .unwrap_or_else(|| gaussian_latent(model.dim_x(), self.seed))
    }

    pub fn z_vector(&self, model: &AnyModel) -> Vec<f64> {
        match (&self.z, &self.model) {
            (Some(z), _) => z.clone(),
            (None, ModelConfig::Gaussian { mu, .. }) => mu.clone(),
            (None, _) => vec![0.0; model.dim_z()],
        }
    }

    pub fn conditioning(&self, model: &AnyModel) -> Conditioning {
        match &self.z_schedule {
            Some(knots) => Conditioning::Scheduled(knots.clone()),
            None => Conditioning::Constant(self.z_vector(model)),
        }
    }

    pub fn loss(&self) -> Result<&LossConfig> {
        self.loss
            .as_ref()
            .ok_or_else(|| Error::Contract("this command needs a loss block".into()))
    }
}

impl LossConfig {
    /// `∂L/∂x` at the final sample `x`.
    pub fn grad_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            LossConfig::Target { target } => TargetLoss {
                target: target.clone(),
            }
            .grad(x),
            LossConfig::Pair { a, b } => PairLoss {
                a: a.clone(),
                b: b.clone(),
            }
            .grad(x),
            LossConfig::Gradient { grad } => {
                if grad.len() != x.len() {
                    return Err(Error::Contract(format!(
                        "loss gradient has length {}, sample has {}",
                        grad.len(),
                        x.len()
                    )));
                }
                Ok(grad.clone())
            }
        }
    }

    /// The loss as an optimization objective; a bare gradient has no value to descend.
    pub fn guidance(&self) -> Result<Box<dyn GuidanceLoss>> {
        match self {
            LossConfig::Target { target } => Ok(Box::new(TargetLoss {
                target: target.clone(),
            })),
            LossConfig::Pair { a, b } => Ok(Box::new(PairLoss {
                a: a.clone(),
                b: b.clone(),
            })),
            LossConfig::Gradient { .. } => Err(Error::Contract(
                "optimize needs a target or pair loss, not a bare gradient".into(),
            )),
        }
    }
}
