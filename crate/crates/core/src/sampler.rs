//! Forward generation with first-order exponential-integrator steps.
//!
//! The probability-flow ODE step is the DDIM / DPM-Solver-1 update
//! `x_t = (α_t/α_s) x_s − σ_t (e^h − 1) ε_θ(x_s, z, s)` with `h = λ_t − λ_s`;
//! the SDE step doubles the ε coefficient and injects
//! `σ_t √(e^{2h} − 1) · ε_s`. Sampling runs from `t = 1` down to `t_eps` and
//! records every visited state so adjoint solvers can replay the trajectory.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adjoint::phi1;
use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::model::NoisePredictionModel;
use crate::schedule::{TimeGrid, VpSchedule};

/// Absolute tolerance for treating two times as the same grid point.
pub const TIME_MATCH_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    #[default]
    Ode,
    Sde,
}

impl SampleKind {
    /// Multiplier on the ε term: 1 for the probability-flow ODE, 2 for the SDE.
    pub fn factor(self) -> f64 {
        match self {
            SampleKind::Ode => 1.0,
            SampleKind::Sde => 2.0,
        }
    }
}

/// Conditioning fed to the model, either fixed or one knot per grid interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    Constant(Vec<f64>),
    /// `knots[k]` is active on `[t_k, t_{k+1})`.
    Scheduled(Vec<Vec<f64>>),
}

impl Conditioning {
    pub fn validate(&self, dim_z: usize, n_intervals: usize) -> Result<()> {
        match self {
            Conditioning::Constant(z) => ensure_len("conditioning", z.len(), dim_z),
            Conditioning::Scheduled(knots) => {
                if knots.len() != n_intervals {
                    return Err(Error::Contract(format!(
                        "{} conditioning knots for {n_intervals} grid intervals",
                        knots.len()
                    )));
                }
                knots
                    .iter()
                    .try_for_each(|k| ensure_len("conditioning knot", k.len(), dim_z))
            }
        }
    }

    /// Conditioning active on interval `k`.
    pub fn at_interval(&self, k: usize) -> &[f64] {
        match self {
            Conditioning::Constant(z) => z,
            Conditioning::Scheduled(knots) => &knots[k],
        }
    }

    pub fn is_scheduled(&self) -> bool {
        matches!(self, Conditioning::Scheduled(_))
    }
}

/// Recorded solution of one sampling run.
///
/// `states[i]` is `x_{t_i}` in grid order (so `states[N]` is the initial
/// latent at `t = 1`). Step `k` maps `t_{k+1} → t_k`; `eps_outputs[k]` and
/// `noise_seq[k]` are the model output and Gaussian draw used by that step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub kind: SampleKind,
    pub states: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_outputs: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_seq: Option<Vec<Vec<f64>>>,
    pub z_record: Conditioning,
    pub seed: u64,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// Generated sample `x_{t_0}`.
    pub fn final_sample(&self) -> &[f64] {
        &self.states[0]
    }

    /// Latent `x_{t_N}` at `t = 1`.
    pub fn initial_latent(&self) -> &[f64] {
        &self.states[self.states.len() - 1]
    }

    pub fn validate(&self, schedule: &VpSchedule, dim_x: usize, dim_z: usize) -> Result<()> {
        self.grid.validate(schedule)?;
        let n = self.grid.n_steps();
        if self.states.len() != n + 1 {
            return Err(Error::Contract(format!(
                "trajectory has {} states for a {}-point grid",
                self.states.len(),
                n + 1
            )));
        }
        for s in &self.states {
            ensure_len("trajectory state", s.len(), dim_x)?;
            ensure_finite("trajectory state", s)?;
        }
        if let Some(eps) = &self.eps_outputs {
            ensure_len("eps_outputs", eps.len(), n)?;
        }
        match (&self.noise_seq, self.kind) {
            (Some(noise), _) => {
                ensure_len("noise_seq", noise.len(), n)?;
                for draw in noise {
                    ensure_len("noise draw", draw.len(), dim_x)?;
                }
            }
            (None, SampleKind::Sde) => {
                return Err(Error::Contract("sde trajectory without noise_seq".into()))
            }
            (None, SampleKind::Ode) => {}
        }
        self.z_record.validate(dim_z, n)
    }

    /// Drop recorded model outputs, keeping only states and noise.
    pub fn without_eps(mut self) -> Self {
        self.eps_outputs = None;
        self
    }

    /// State at time `t`: the recorded value when `t` is a grid point,
    /// piecewise-linear interpolation between neighbours otherwise.
    pub fn state_at(&self, t: f64) -> Result<Vec<f64>> {
        let times = self.grid.times();
        if self.states.len() != times.len() {
            return Err(Error::Contract("trajectory has no recorded states".into()));
        }
        if t < self.grid.start() - TIME_MATCH_TOL || t > self.grid.end() + TIME_MATCH_TOL {
            return Err(Error::Contract(format!(
                "time {t} outside trajectory span [{}, {}]",
                self.grid.start(),
                self.grid.end()
            )));
        }
        let k = times.partition_point(|&x| x < t);
        if k < times.len() && (times[k] - t).abs() <= TIME_MATCH_TOL {
            return Ok(self.states[k].clone());
        }
        if k > 0 && (t - times[k - 1]).abs() <= TIME_MATCH_TOL {
            return Ok(self.states[k - 1].clone());
        }
        let (lo, hi) = (k - 1, k);
        let w = (t - times[lo]) / (times[hi] - times[lo]);
        Ok(self.states[lo]
            .iter()
            .zip(&self.states[hi])
            .map(|(a, b)| a + w * (b - a))
            .collect())
    }
}

/// Scalar coefficients of one step from `s` down to `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    /// `α_t / α_s`
    pub ratio: f64,
    /// `σ_t (e^h − 1)`, `h = λ_t − λ_s`
    pub eps_coeff: f64,
    /// `σ_t √(e^{2h} − 1)`
    pub noise_coeff: f64,
}

impl StepCoefficients {
    pub fn new(schedule: &VpSchedule, s: f64, t: f64) -> Result<Self> {
        if t > s {
            return Err(Error::Contract(format!(
                "sampler step must go backward in time, got s = {s}, t = {t}"
            )));
        }
        let vs = schedule.values(s)?;
        let vt = schedule.values(t)?;
        let h = vt.lambda - vs.lambda;
        Ok(Self {
            ratio: vt.alpha / vs.alpha,
            eps_coeff: vt.sigma * h * phi1(h),
            noise_coeff: vt.sigma * (2.0 * h).exp_m1().max(0.0).sqrt(),
        })
    }
}

fn combine(
    coeffs: &StepCoefficients,
    factor: f64,
    x_s: &[f64],
    eps: &[f64],
    noise: Option<&[f64]>,
) -> Vec<f64> {
    let mut out: Vec<f64> = x_s
        .iter()
        .zip(eps)
        .map(|(x, e)| coeffs.ratio * x - factor * coeffs.eps_coeff * e)
        .collect();
    if let Some(noise) = noise {
        for (o, n) in out.iter_mut().zip(noise) {
            *o += coeffs.noise_coeff * n;
        }
    }
    out
}

/// One probability-flow ODE step from `s` to `t ≤ s`.
pub fn ode_step<M: NoisePredictionModel + ?Sized>(
    model: &M,
    schedule: &VpSchedule,
    x_s: &[f64],
    s: f64,
    t: f64,
    z: &[f64],
) -> Result<Vec<f64>> {
    let coeffs = StepCoefficients::new(schedule, s, t)?;
    let eps = model.eps(x_s, z, s)?;
    Ok(combine(&coeffs, 1.0, x_s, &eps, None))
}

/// One diffusion-SDE step from `s` to `t ≤ s` using the supplied standard-normal draw.
#[allow(clippy::too_many_arguments)]
pub fn sde_step<M: NoisePredictionModel + ?Sized>(
    model: &M,
    schedule: &VpSchedule,
    x_s: &[f64],
    s: f64,
    t: f64,
    z: &[f64],
    noise: &[f64],
) -> Result<Vec<f64>> {
    ensure_len("noise draw", noise.len(), x_s.len())?;
    let coeffs = StepCoefficients::new(schedule, s, t)?;
    let eps = model.eps(x_s, z, s)?;
    Ok(combine(&coeffs, 2.0, x_s, &eps, Some(noise)))
}

/// Seeded source of standard-normal draws (ChaCha20, counter based).
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha20Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn draw(&mut self, d: usize) -> Vec<f64> {
        (0..d)
            .map(|_| StandardNormal.sample(&mut self.rng))
            .collect()
    }
}

/// Standard-normal latent of dimension `d` drawn from `seed`.
pub fn gaussian_latent(d: usize, seed: u64) -> Vec<f64> {
    NoiseSource::new(seed).draw(d)
}

#[allow(clippy::too_many_arguments)]
fn run<M: NoisePredictionModel + ?Sized>(
    model: &M,
    schedule: &VpSchedule,
    grid: &TimeGrid,
    x_init: &[f64],
    z: &Conditioning,
    kind: SampleKind,
    mut next_noise: impl FnMut(usize) -> Option<Vec<f64>>,
    seed: u64,
) -> Result<Trajectory> {
    grid.validate(schedule)?;
    let d = model.dim_x();
    ensure_len("initial latent", x_init.len(), d)?;
    let n = grid.n_steps();
    z.validate(model.dim_z(), n)?;
    let times = grid.times();

    let mut states = vec![Vec::new(); n + 1];
    let mut eps_outputs = vec![Vec::new(); n];
    let mut noise_seq = Vec::with_capacity(n);
    states[n] = x_init.to_vec();
    for k in (0..n).rev() {
        let (s, t) = (times[k + 1], times[k]);
        let coeffs = StepCoefficients::new(schedule, s, t)?;
        let eps = model.eps(&states[k + 1], z.at_interval(k), s)?;
        let noise = next_noise(k);
        let x_t = combine(
            &coeffs,
            kind.factor(),
            &states[k + 1],
            &eps,
            noise.as_deref(),
        );
        ensure_finite("sampled state", &x_t)?;
        states[k] = x_t;
        eps_outputs[k] = eps;
        if let Some(noise) = noise {
            noise_seq.push((k, noise));
        }
    }
    let noise_seq = match kind {
        SampleKind::Ode => None,
        SampleKind::Sde => {
            noise_seq.sort_by_key(|(k, _)| *k);
            Some(noise_seq.into_iter().map(|(_, v)| v).collect())
        }
    };
    Ok(Trajectory {
        grid: grid.clone(),
        kind,
        states,
        eps_outputs: Some(eps_outputs),
        noise_seq,
        z_record: z.clone(),
        seed,
    })
}

/// Sample from `t = 1` to `t_eps` along `grid`, recording states, model
/// outputs and (for SDE sampling) the noise draws taken from `seed`.
pub fn sample<M: NoisePredictionModel + ?Sized>(
    model: &M,
    schedule: &VpSchedule,
    grid: &TimeGrid,
    x_init: &[f64],
    z: &Conditioning,
    kind: SampleKind,
    seed: u64,
) -> Result<Trajectory> {
    let d = model.dim_x();
    let mut source = NoiseSource::new(seed);
    run(
        model,
        schedule,
        grid,
        x_init,
        z,
        kind,
        |_| match kind {
            SampleKind::Ode => None,
            SampleKind::Sde => Some(source.draw(d)),
        },
        seed,
    )
}

/// SDE sampling that reuses a given noise realization instead of drawing one.
#[allow(clippy::too_many_arguments)]
pub fn sample_with_noise<M: NoisePredictionModel + ?Sized>(
    model: &M,
    schedule: &VpSchedule,
    grid: &TimeGrid,
    x_init: &[f64],
    z: &Conditioning,
    noise_seq: &[Vec<f64>],
    seed: u64,
) -> Result<Trajectory> {
    ensure_len("noise_seq", noise_seq.len(), grid.n_steps())?;
    for draw in noise_seq {
        ensure_len("noise draw", draw.len(), model.dim_x())?;
    }
    run(
        model,
        schedule,
        grid,
        x_init,
        z,
        SampleKind::Sde,
        |k| Some(noise_seq[k].clone()),
        seed,
    )
}

/// Forward-diffused states consistent with the VP marginals.
///
/// `x_{t_0}` is `x0` itself, `x_{t_N}` is `x_init`, and every interior state
/// is an independent draw from `q(x_t | x0) = N(α_t x0, σ_t² I)`.
pub fn diffuse_marginals(
    schedule: &VpSchedule,
    grid: &TimeGrid,
    x0: &[f64],
    x_init: &[f64],
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    ensure_len("initial latent", x_init.len(), x0.len())?;
    let n = grid.n_steps();
    let mut source = NoiseSource::new(seed);
    let mut states = Vec::with_capacity(n + 1);
    states.push(x0.to_vec());
    for &t in &grid.times()[1..n] {
        let v = schedule.values(t)?;
        let draw = source.draw(x0.len());
        states.push(
            x0.iter()
                .zip(&draw)
                .map(|(x, e)| v.alpha * x + v.sigma * e)
                .collect(),
        );
    }
    states.push(x_init.to_vec());
    Ok(states)
}

/// Noise sequence that makes SDE steps reproduce `states` exactly.
///
/// `ε_s = (x_t − (α_t/α_s) x_s + 2σ_t(e^h−1) ε_θ(x_s, z, s)) / (σ_t √(e^{2h}−1))`.
pub fn recover_noise<M: NoisePredictionModel + ?Sized>(
    model: &M,
    schedule: &VpSchedule,
    grid: &TimeGrid,
    states: &[Vec<f64>],
    z: &Conditioning,
) -> Result<Vec<Vec<f64>>> {
    let n = grid.n_steps();
    ensure_len("states", states.len(), n + 1)?;
    z.validate(model.dim_z(), n)?;
    let times = grid.times();
    (0..n)
        .map(|k| {
            let (s, t) = (times[k + 1], times[k]);
            let coeffs = StepCoefficients::new(schedule, s, t)?;
            if !(coeffs.noise_coeff.is_finite() && coeffs.noise_coeff > 0.0) {
                return Err(Error::Numerical(format!(
                    "degenerate step {k}: zero noise scale between t = {t} and s = {s}"
                )));
            }
            let eps = model.eps(&states[k + 1], z.at_interval(k), s)?;
            Ok(states[k]
                .iter()
                .zip(&states[k + 1])
                .zip(&eps)
                .map(|((x_t, x_s), e)| {
                    (x_t - coeffs.ratio * x_s + 2.0 * coeffs.eps_coeff * e) / coeffs.noise_coeff
                })
                .collect())
        })
        .collect()
}

/// Marginal-consistent states and the noise that replays them.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleInversion {
    pub states: Vec<Vec<f64>>,
    pub noise_seq: Vec<Vec<f64>>,
}

/// Cycle-SDE inversion: diffuse `x0_target` forward, then recover the noise
/// sequence under which the SDE sampler lands exactly on every state.
#[allow(clippy::too_many_arguments)]
pub fn cycle_sde_invert<M: NoisePredictionModel + ?Sized>(
    model: &M,
    schedule: &VpSchedule,
    grid: &TimeGrid,
    x0_target: &[f64],
    x_init: &[f64],
    z: &Conditioning,
    seed: u64,
) -> Result<CycleInversion> {
    ensure_len("target", x0_target.len(), model.dim_x())?;
    let states = diffuse_marginals(schedule, grid, x0_target, x_init, seed)?;
    let noise_seq = recover_noise(model, schedule, grid, &states, z)?;
    Ok(CycleInversion { states, noise_seq })
}

/// Largest absolute difference between two equally shaped state lists.
pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(u, v)| u.iter().zip(v).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}
