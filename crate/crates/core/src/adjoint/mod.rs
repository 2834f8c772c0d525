//! AdjointDEIS: exponential-integrator solvers for the adjoint of diffusion
//! ODEs and SDEs.
//!
//! The adjoint runs forward in `t`, from `t_eps` (where the loss gradient is
//! known) to `t = 1`. With `h = λ_s − λ_t < 0` for a step `t → s`, the
//! first-order update is
//!
//! ```text
//! a_x(s) = (α_t/α_s) a_x(t) + k σ_s (e^h − 1) V(x; t) / α_s²
//! a_z(s) = a_z(t)           + k σ_s (e^h − 1) V(z; t) / α_s
//! a_θ(s) = a_θ(t)           + k σ_s (e^h − 1) V(θ; t) / α_s
//! ```
//!
//! where `V(x; t) = α_t² a_xᵀ∂ε/∂x`, `V(z; t) = α_t a_xᵀ∂ε/∂z`,
//! `V(θ; t) = α_t a_xᵀ∂ε/∂θ` and `k` is 1 for the probability-flow ODE and 2
//! for the diffusion SDE. The linear part is integrated exactly, so a model
//! with `ε ≡ 0` incurs no discretisation error at all.

mod phi;

pub use phi::{phi1, phi2, SERIES_CUTOFF};

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::model::NoisePredictionModel;
use crate::sampler::{Conditioning, SampleKind, Trajectory, TIME_MATCH_TOL};
use crate::schedule::{TimeGrid, VpSchedule};

/// Smallest step-ratio ρ the multistep solver accepts.
pub const MIN_RHO: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum AdjointOrder {
    /// AdjointDEIS-1
    #[default]
    First,
    /// AdjointDEIS-2M
    SecondMultistep,
}

impl AdjointOrder {
    pub fn as_u8(self) -> u8 {
        match self {
            AdjointOrder::First => 1,
            AdjointOrder::SecondMultistep => 2,
        }
    }

    pub fn solver_name(self) -> &'static str {
        match self {
            AdjointOrder::First => "adjoint-deis-1",
            AdjointOrder::SecondMultistep => "adjoint-deis-2m",
        }
    }
}

impl TryFrom<u8> for AdjointOrder {
    type Error = Error;

    fn try_from(order: u8) -> Result<Self> {
        match order {
            1 => Ok(AdjointOrder::First),
            2 => Ok(AdjointOrder::SecondMultistep),
            _ => Err(Error::Contract(format!(
                "adjoint order must be 1 or 2, got {order}"
            ))),
        }
    }
}

impl From<AdjointOrder> for u8 {
    fn from(order: AdjointOrder) -> u8 {
        order.as_u8()
    }
}

/// Cotangents `(a_x, a_z, a_θ)` at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjointState {
    pub a_x: Vec<f64>,
    pub a_z: Vec<f64>,
    pub a_theta: Vec<f64>,
    pub t: f64,
}

impl AdjointState {
    /// Initial condition at `t_eps`: `a_x = ∂L/∂x`, `a_z = 0`, `a_θ = 0`.
    pub fn initial(loss_grad: &[f64], dim_z: usize, dim_theta: usize, t: f64) -> Self {
        Self {
            a_x: loss_grad.to_vec(),
            a_z: vec![0.0; dim_z],
            a_theta: vec![0.0; dim_theta],
            t,
        }
    }

    fn check_finite(&self) -> Result<()> {
        let at = |what: &str| format!("{what} at t = {}", self.t);
        ensure_finite(&at("a_x"), &self.a_x)?;
        ensure_finite(&at("a_z"), &self.a_z)?;
        ensure_finite(&at("a_theta"), &self.a_theta)
    }
}

/// `V(x; t) = α_t² aᵀ∂ε/∂x`, `V(z; t) = α_t aᵀ∂ε/∂z`, `V(θ; t) = α_t aᵀ∂ε/∂θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledVjp {
    pub v_x: Vec<f64>,
    pub v_z: Vec<f64>,
    pub v_theta: Vec<f64>,
    pub t: f64,
}

impl ScaledVjp {
    pub fn evaluate<M: NoisePredictionModel + ?Sized>(
        model: &M,
        schedule: &VpSchedule,
        a_x: &[f64],
        x_t: &[f64],
        z_t: &[f64],
        t: f64,
    ) -> Result<Self> {
        let alpha = schedule.alpha(t)?;
        let vjp = model.vjp(a_x, x_t, z_t, t)?;
        let scaled = Self {
            v_x: vjp.vjp_x.iter().map(|v| alpha * alpha * v).collect(),
            v_z: vjp.vjp_z.iter().map(|v| alpha * v).collect(),
            v_theta: vjp.vjp_theta.iter().map(|v| alpha * v).collect(),
            t,
        };
        ensure_finite("vector-Jacobian product", &scaled.v_x)?;
        ensure_finite("vector-Jacobian product", &scaled.v_z)?;
        ensure_finite("vector-Jacobian product", &scaled.v_theta)?;
        Ok(scaled)
    }
}

/// Log-SNR geometry of one adjoint step `t → s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointStepPlan {
    pub t: f64,
    pub s: f64,
    /// `λ_s − λ_t`, negative since λ decreases in time.
    pub h: f64,
    /// `(r, ρ)` with `ρ = (λ_t − λ_r)/h` when a previous evaluation exists.
    pub prev: Option<(f64, f64)>,
    pub sde_factor: f64,
    /// `α_t / α_s`
    pub ratio: f64,
    /// `σ_s (e^h − 1)`
    pub weight: f64,
    pub alpha_s: f64,
}

impl AdjointStepPlan {
    pub fn new(
        schedule: &VpSchedule,
        t: f64,
        s: f64,
        prev_r: Option<f64>,
        kind: SampleKind,
    ) -> Result<Self> {
        if s <= t {
            return Err(Error::Contract(format!(
                "adjoint step must go forward in time, got t = {t}, s = {s}"
            )));
        }
        let vt = schedule.values(t)?;
        let vs = schedule.values(s)?;
        let h = vs.lambda - vt.lambda;
        let prev = match prev_r {
            None => None,
            Some(r) => {
                if r >= t {
                    return Err(Error::Contract(format!(
                        "previous evaluation at r = {r} must precede t = {t}"
                    )));
                }
                let rho = (vt.lambda - schedule.values(r)?.lambda) / h;
                if rho.is_nan() || rho <= MIN_RHO {
                    return Err(Error::Contract(format!(
                        "step ratio rho = {rho} is below {MIN_RHO}"
                    )));
                }
                Some((r, rho))
            }
        };
        Ok(Self {
            t,
            s,
            h,
            prev,
            sde_factor: kind.factor(),
            ratio: vt.alpha / vs.alpha,
            weight: vs.sigma * h * phi1(h),
            alpha_s: vs.alpha,
        })
    }

    /// Apply the update with effective scaled product `d` (either `V(t)` or
    /// the multistep combination).
    fn apply(
        &self,
        state: &AdjointState,
        d_x: &[f64],
        d_z: &[f64],
        d_theta: &[f64],
    ) -> AdjointState {
        let k = self.sde_factor * self.weight;
        let cx = k / (self.alpha_s * self.alpha_s);
        let cz = k / self.alpha_s;
        AdjointState {
            a_x: state
                .a_x
                .iter()
                .zip(d_x)
                .map(|(a, v)| self.ratio * a + cx * v)
                .collect(),
            a_z: state.a_z.iter().zip(d_z).map(|(a, v)| a + cz * v).collect(),
            a_theta: state
                .a_theta
                .iter()
                .zip(d_theta)
                .map(|(a, v)| a + cz * v)
                .collect(),
            t: self.s,
        }
    }
}

fn check_state<M: NoisePredictionModel + ?Sized>(model: &M, state: &AdjointState) -> Result<()> {
    ensure_len("a_x", state.a_x.len(), model.dim_x())?;
    ensure_len("a_z", state.a_z.len(), model.dim_z())?;
    ensure_len("a_theta", state.a_theta.len(), model.dim_theta())
}

/// Multistep combination `(1 + 1/(2ρ)) V(t) − V(r)/(2ρ)`.
fn multistep_combination(rho: f64, now: &[f64], prev: &[f64]) -> Vec<f64> {
    let c = 1.0 / (2.0 * rho);
    now.iter()
        .zip(prev)
        .map(|(v, p)| (1.0 + c) * v - c * p)
        .collect()
}

fn first_order_from(
    plan: &AdjointStepPlan,
    state: &AdjointState,
    v: &ScaledVjp,
) -> Result<AdjointState> {
    let next = plan.apply(state, &v.v_x, &v.v_z, &v.v_theta);
    next.check_finite()?;
    Ok(next)
}

/// One AdjointDEIS-1 step from `state.t` to `s`.
#[allow(clippy::too_many_arguments)]
pub fn adjoint_deis_1_step<M: NoisePredictionModel + ?Sized>(
    state: &AdjointState,
    s: f64,
    x_t: &[f64],
    z_t: &[f64],
    model: &M,
    schedule: &VpSchedule,
    kind: SampleKind,
) -> Result<AdjointState> {
    check_state(model, state)?;
    let plan = AdjointStepPlan::new(schedule, state.t, s, None, kind)?;
    let v = ScaledVjp::evaluate(model, schedule, &state.a_x, x_t, z_t, state.t)?;
    first_order_from(&plan, state, &v)
}

/// One AdjointDEIS-2M step from `state.t` to `s` using the buffered scaled
/// product at `r < t`. Returns the new state and the fresh product at `t`.
#[allow(clippy::too_many_arguments)]
pub fn adjoint_deis_2m_step<M: NoisePredictionModel + ?Sized>(
    state: &AdjointState,
    s: f64,
    prev: Option<&ScaledVjp>,
    x_t: &[f64],
    z_t: &[f64],
    model: &M,
    schedule: &VpSchedule,
    kind: SampleKind,
) -> Result<(AdjointState, ScaledVjp)> {
    check_state(model, state)?;
    let prev = prev.ok_or_else(|| {
        Error::Contract("multistep step needs a buffered product from the previous step".into())
    })?;
    let plan = AdjointStepPlan::new(schedule, state.t, s, Some(prev.t), kind)?;
    let v = ScaledVjp::evaluate(model, schedule, &state.a_x, x_t, z_t, state.t)?;
    let next = multistep_from(&plan, state, &v, prev)?;
    Ok((next, v))
}

fn multistep_from(
    plan: &AdjointStepPlan,
    state: &AdjointState,
    v: &ScaledVjp,
    prev: &ScaledVjp,
) -> Result<AdjointState> {
    let (_, rho) = plan.prev.expect("multistep plan carries rho");
    let d_x = multistep_combination(rho, &v.v_x, &prev.v_x);
    let d_z = multistep_combination(rho, &v.v_z, &prev.v_z);
    let d_theta = multistep_combination(rho, &v.v_theta, &prev.v_theta);
    let next = plan.apply(state, &d_x, &d_z, &d_theta);
    next.check_finite()?;
    Ok(next)
}

/// Gradients with one `a_z` bucket per conditioning knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledAdjoint {
    pub a_x: Vec<f64>,
    /// `a_z_knots[k]` is the gradient with respect to knot `k`.
    pub a_z_knots: Vec<Vec<f64>>,
    pub a_theta: Vec<f64>,
    pub t: f64,
}

impl ScheduledAdjoint {
    /// Gradient with respect to a single `z` shared by every knot.
    pub fn summed(&self) -> AdjointState {
        let dim_z = self.a_z_knots.first().map_or(0, Vec::len);
        let mut a_z = vec![0.0; dim_z];
        for knot in &self.a_z_knots {
            for (acc, v) in a_z.iter_mut().zip(knot) {
                *acc += v;
            }
        }
        AdjointState {
            a_x: self.a_x.clone(),
            a_z,
            a_theta: self.a_theta.clone(),
            t: self.t,
        }
    }
}

fn check_solve_inputs<M: NoisePredictionModel + ?Sized>(
    model: &M,
    schedule: &VpSchedule,
    traj: &Trajectory,
    loss_grad: &[f64],
    adjoint_grid: &TimeGrid,
    kind: SampleKind,
) -> Result<()> {
    traj.validate(schedule, model.dim_x(), model.dim_z())?;
    adjoint_grid.validate(schedule)?;
    ensure_len("loss gradient", loss_grad.len(), model.dim_x())?;
    ensure_finite("loss gradient", loss_grad)?;
    if traj.kind != kind {
        return Err(Error::Contract(format!(
            "adjoint kind {kind:?} does not match trajectory kind {:?}",
            traj.kind
        )));
    }
    if kind == SampleKind::Sde && traj.noise_seq.is_none() {
        return Err(Error::Contract(
            "sde adjoint needs the recorded noise sequence".into(),
        ));
    }
    if (adjoint_grid.start() - traj.grid.start()).abs() > TIME_MATCH_TOL
        || adjoint_grid.end() > traj.grid.end() + TIME_MATCH_TOL
    {
        return Err(Error::Contract(format!(
            "adjoint grid [{}, {}] is not inside the trajectory span [{}, {}] starting at its end point",
            adjoint_grid.start(),
            adjoint_grid.end(),
            traj.grid.start(),
            traj.grid.end()
        )));
    }
    Ok(())
}

/// Trajectory interval whose knot governs the adjoint step `[t, s]`.
fn knot_for_step(traj: &Trajectory, t: f64, s: f64) -> Result<usize> {
    if !traj.z_record.is_scheduled() {
        return Ok(0);
    }
    let times = traj.grid.times();
    let k = traj
        .grid
        .interval_of(0.5 * (t + s))
        .ok_or_else(|| Error::Contract(format!("adjoint step [{t}, {s}] outside trajectory")))?;
    if t < times[k] - TIME_MATCH_TOL || s > times[k + 1] + TIME_MATCH_TOL {
        return Err(Error::Contract(format!(
            "adjoint step [{t}, {s}] straddles a conditioning knot boundary"
        )));
    }
    Ok(k)
}

fn solve_impl<M: NoisePredictionModel + ?Sized>(
    model: &M,
    schedule: &VpSchedule,
    traj: &Trajectory,
    loss_grad: &[f64],
    adjoint_grid: &TimeGrid,
    order: AdjointOrder,
    kind: SampleKind,
) -> Result<ScheduledAdjoint> {
    check_solve_inputs(model, schedule, traj, loss_grad, adjoint_grid, kind)?;
    let n_knots = match &traj.z_record {
        Conditioning::Constant(_) => 1,
        Conditioning::Scheduled(knots) => knots.len(),
    };
    let dim_z = model.dim_z();
    let mut buckets = vec![vec![0.0; dim_z]; n_knots];
    let times = adjoint_grid.times();
    let mut state = AdjointState::initial(loss_grad, dim_z, model.dim_theta(), times[0]);
    let mut prev: Option<(usize, ScaledVjp)> = None;

    for w in times.windows(2) {
        let (t, s) = (w[0], w[1]);
        let knot = knot_for_step(traj, t, s)?;
        let x_t = traj.state_at(t)?;
        let z_t = traj.z_record.at_interval(knot);
        let v = ScaledVjp::evaluate(model, schedule, &state.a_x, &x_t, z_t, t)?;
        // the multistep history is only valid while the conditioning is unchanged
        let buffered = match (&prev, order) {
            (Some((k, p)), AdjointOrder::SecondMultistep) if *k == knot => Some(p),
            _ => None,
        };
        let plan = AdjointStepPlan::new(schedule, t, s, buffered.map(|p| p.t), kind)?;
        let mut next = match buffered {
            Some(p) => multistep_from(&plan, &state, &v, p)?,
            None => first_order_from(&plan, &state, &v)?,
        };
        for (acc, (new, old)) in buckets[knot]
            .iter_mut()
            .zip(next.a_z.iter().zip(&state.a_z))
        {
            *acc += new - old;
        }
        next.a_z = vec![0.0; dim_z];
        state = next;
        prev = Some((knot, v));
    }

    Ok(ScheduledAdjoint {
        a_x: state.a_x,
        a_z_knots: buckets,
        a_theta: state.a_theta,
        t: state.t,
    })
}

/// Integrate the adjoint from `t_eps` to the end of `adjoint_grid`, reading
/// states from `traj` (exactly at shared grid points, linearly interpolated
/// elsewhere). The returned `a_x` is `∂L/∂x_T`, `a_z` is `∂L/∂z` (summed over
/// knots for scheduled conditioning) and `a_theta` is `∂L/∂θ`.
pub fn solve_adjoint<M: NoisePredictionModel + ?Sized>(
    model: &M,
    schedule: &VpSchedule,
    traj: &Trajectory,
    loss_grad: &[f64],
    adjoint_grid: &TimeGrid,
    order: AdjointOrder,
    kind: SampleKind,
) -> Result<AdjointState> {
    Ok(solve_impl(model, schedule, traj, loss_grad, adjoint_grid, order, kind)?.summed())
}

/// Like [`solve_adjoint`], but keeps the `a_z` contribution of each
/// conditioning knot separate. Every adjoint step must lie inside one
/// interval of the trajectory grid.
pub fn solve_adjoint_scheduled_z<M: NoisePredictionModel + ?Sized>(
    model: &M,
    schedule: &VpSchedule,
    traj: &Trajectory,
    loss_grad: &[f64],
    adjoint_grid: &TimeGrid,
    order: AdjointOrder,
    kind: SampleKind,
) -> Result<ScheduledAdjoint> {
    if !traj.z_record.is_scheduled() {
        return Err(Error::Contract(
            "trajectory was sampled with constant conditioning".into(),
        ));
    }
    solve_impl(model, schedule, traj, loss_grad, adjoint_grid, order, kind)
}
