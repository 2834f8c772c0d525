//! Independent references for the adjoint solvers: central finite
//! differences, backpropagation through the discrete sampler, a quadrature
//! solution of the exact adjoint for the Gaussian model, and log-log order
//! fitting.

use serde::{Deserialize, Serialize};

use crate::adjoint::{solve_adjoint, AdjointOrder, AdjointState};
use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::model::NoisePredictionModel;
use crate::par::Execution;
use crate::sampler::{Conditioning, SampleKind, StepCoefficients, Trajectory};
use crate::schedule::{SpacingRule, TimeGrid, VpSchedule, T_END};

/// Finite-difference step used throughout the test suite.
pub const FD_STEP: f64 = 1e-5;

/// Errors below this are treated as roundoff and left out of order fits.
pub const ROUNDOFF_FLOOR: f64 = 1e-13;

/// Quadrature resolution of [`exact_linear_adjoint`].
pub const EXACT_QUADRATURE_STEPS: usize = 4096;

/// Central-difference gradient of `f` at `input`, one coordinate per task.
pub fn finite_diff_grad<F>(f: F, input: &[f64], step: f64, exec: Execution) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + Send,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Contract(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    exec.try_map(input.len(), |i| {
        let mut v = input.to_vec();
        v[i] = input[i] + step;
        let up = f(&v)?;
        v[i] = input[i] - step;
        let down = f(&v)?;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite loss while differencing coordinate {i}"
            )));
        }
        Ok((up - down) / (2.0 * step))
    })
}

/// `‖got − want‖₂ / ‖want‖₂`, or the absolute norm when `want` is zero.
pub fn relative_error(got: &[f64], want: &[f64]) -> f64 {
    let diff = got
        .iter()
        .zip(want)
        .map(|(g, w)| (g - w) * (g - w))
        .sum::<f64>()
        .sqrt();
    let scale = want.iter().map(|w| w * w).sum::<f64>().sqrt();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

pub fn max_abs_error(got: &[f64], want: &[f64]) -> f64 {
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs())
        .fold(0.0, f64::max)
}

/// Exact gradients of the discrete sampler composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteGradients {
    pub grad_x_init: Vec<f64>,
    /// Summed over knots for scheduled conditioning.
    pub grad_z: Vec<f64>,
    /// One entry per knot (a single entry for constant conditioning).
    pub grad_z_knots: Vec<Vec<f64>>,
    pub grad_theta: Vec<f64>,
}

/// Reverse-mode differentiation of the recorded sampler steps with the noise
/// held fixed. This is the discretize-then-optimize reference.
pub fn backprop_through_sampler<M: NoisePredictionModel + ?Sized>(
    model: &M,
    schedule: &VpSchedule,
    traj: &Trajectory,
    loss_grad: &[f64],
) -> Result<DiscreteGradients> {
    traj.validate(schedule, model.dim_x(), model.dim_z())?;
    if traj.eps_outputs.is_none() {
        return Err(Error::Contract(
            "trajectory was recorded without model outputs".into(),
        ));
    }
    ensure_len("loss gradient", loss_grad.len(), model.dim_x())?;
    let times = traj.grid.times();
    let n = traj.grid.n_steps();
    let n_knots = match &traj.z_record {
        Conditioning::Constant(_) => 1,
        Conditioning::Scheduled(knots) => knots.len(),
    };
    let factor = traj.kind.factor();
    let mut grad_z_knots = vec![vec![0.0; model.dim_z()]; n_knots];
    let mut grad_theta = vec![0.0; model.dim_theta()];
    let mut a = loss_grad.to_vec();

    for k in 0..n {
        let (s, t) = (times[k + 1], times[k]);
        let coeffs = StepCoefficients::new(schedule, s, t)?;
        let c = -factor * coeffs.eps_coeff;
        let vjp = model.vjp(&a, &traj.states[k + 1], traj.z_record.at_interval(k), s)?;
        let bucket = if traj.z_record.is_scheduled() { k } else { 0 };
        for (acc, v) in grad_z_knots[bucket].iter_mut().zip(&vjp.vjp_z) {
            *acc += c * v;
        }
        for (acc, v) in grad_theta.iter_mut().zip(&vjp.vjp_theta) {
            *acc += c * v;
        }
        a = a
            .iter()
            .zip(&vjp.vjp_x)
            .map(|(ai, v)| coeffs.ratio * ai + c * v)
            .collect();
        ensure_finite(&format!("backpropagated cotangent at step {k}"), &a)?;
    }

    let mut grad_z = vec![0.0; model.dim_z()];
    for knot in &grad_z_knots {
        for (acc, v) in grad_z.iter_mut().zip(knot) {
            *acc += v;
        }
    }
    Ok(DiscreteGradients {
        grad_x_init: a,
        grad_z,
        grad_z_knots,
        grad_theta,
    })
}

/// Continuous-time gradients of the Gaussian model's exact probability-flow map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactAdjoint {
    /// `x_{t_eps}` reached by the exact flow from `x_init`.
    pub x_final: Vec<f64>,
    pub grad_x_init: Vec<f64>,
    pub grad_z: Vec<f64>,
    pub grad_theta: Vec<f64>,
    /// Scalar Jacobian `∂x_{t_eps}/∂x_T`.
    pub flow_multiplier: f64,
    /// Scalar Jacobian `∂x_{t_eps}/∂μ`.
    pub mean_weight: f64,
}

/// Integrals `K = ∫k`, `K_c = ∫∂k/∂c`, `B = ∫b e^{−K}` and
/// `B_c = ∫(∂b/∂c − b K_c) e^{−K}` over `[t_eps, 1]`.
fn flow_coefficient_integrals(schedule: &VpSchedule, c: f64, steps: usize) -> Result<[f64; 4]> {
    // With s² = α²c² + σ², the flow is dx/dt = k x − b μ where
    // k = f + g²/(2s²) and b = g² α / (2s²).
    let rhs = |t: f64, y: &[f64; 4]| -> Result<[f64; 4]> {
        let f = schedule.drift_coeff(t)?;
        let g2 = schedule.diffusion_coeff_sq(t)?;
        let alpha = schedule.alpha(t)?;
        let sigma = schedule.sigma(t)?;
        let s2 = alpha * alpha * c * c + sigma * sigma;
        let k = f + g2 / (2.0 * s2);
        let k_c = -g2 * alpha * alpha * c / (s2 * s2);
        let b = g2 * alpha / (2.0 * s2);
        let b_c = -g2 * alpha * alpha * alpha * c / (s2 * s2);
        let decay = (-y[0]).exp();
        Ok([k, k_c, b * decay, (b_c - b * y[1]) * decay])
    };
    let t0 = schedule.t_eps;
    let dt = (T_END - t0) / steps as f64;
    let mut y = [0.0; 4];
    let axpy = |y: &[f64; 4], k: &[f64; 4], w: f64| -> [f64; 4] {
        [
            y[0] + w * k[0],
            y[1] + w * k[1],
            y[2] + w * k[2],
            y[3] + w * k[3],
        ]
    };
    for i in 0..steps {
        let t = t0 + i as f64 * dt;
        let t_next = if i + 1 == steps {
            T_END
        } else {
            t0 + (i + 1) as f64 * dt
        };
        let k1 = rhs(t, &y)?;
        let k2 = rhs(t + 0.5 * dt, &axpy(&y, &k1, 0.5 * dt))?;
        let k3 = rhs(t + 0.5 * dt, &axpy(&y, &k2, 0.5 * dt))?;
        let k4 = rhs(t_next, &axpy(&y, &k3, dt))?;
        for j in 0..4 {
            y[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }
    ensure_finite("flow coefficient integrals", &y)?;
    Ok(y)
}

/// Exact continuous adjoint for [`crate::model::AnalyticGaussianModel`].
///
/// The probability-flow ODE is affine in `x`, so the flow map is
/// `x_{t_eps} = e^{−K} x_T + B μ` and all three gradients follow from four
/// scalar integrals computed by RK4 with `steps` uniform steps. `loss_grad`
/// is evaluated at the exact end point.
pub fn exact_linear_adjoint<M, G>(
    model: &M,
    schedule: &VpSchedule,
    x_init: &[f64],
    z: &[f64],
    loss_grad: G,
    steps: usize,
) -> Result<ExactAdjoint>
where
    M: NoisePredictionModel + ?Sized,
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let analytic = model.as_analytic().ok_or_else(|| {
        Error::Contract("exact adjoint requires the analytic Gaussian model".into())
    })?;
    if steps == 0 {
        return Err(Error::Contract("quadrature needs at least one step".into()));
    }
    let d = analytic.dim_x();
    ensure_len("initial latent", x_init.len(), d)?;
    ensure_len("conditioning", z.len(), d)?;
    let [k, k_c, b, b_c] = flow_coefficient_integrals(schedule, analytic.c(), steps)?;
    let decay = (-k).exp();
    let x_final: Vec<f64> = x_init
        .iter()
        .zip(z)
        .map(|(x, m)| decay * x + b * m)
        .collect();
    let g = loss_grad(&x_final)?;
    ensure_len("loss gradient", g.len(), d)?;
    let grad_c: f64 = g
        .iter()
        .zip(x_init.iter().zip(z))
        .map(|(gi, (x, m))| gi * (-k_c * decay * x + b_c * m))
        .sum();
    Ok(ExactAdjoint {
        x_final,
        grad_x_init: g.iter().map(|v| decay * v).collect(),
        grad_z: g.iter().map(|v| b * v).collect(),
        grad_theta: vec![grad_c],
        flow_multiplier: decay,
        mean_weight: b,
    })
}

/// Least-squares line through `(log h, log error)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    /// Points used in the fit, as `(h_max, error)`.
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
}

/// Fit the empirical order from `(h_max, error)` pairs. Errors under
/// [`ROUNDOFF_FLOOR`] are dropped; at least three points must remain.
pub fn estimate_order(points: &[(f64, f64)]) -> Result<OrderFit> {
    let kept: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|&(h, e)| h.is_finite() && h > 0.0 && e.is_finite() && e >= ROUNDOFF_FLOOR)
        .collect();
    if kept.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "{} of {} points above the roundoff floor, need 3",
            kept.len(),
            points.len()
        )));
    }
    let n = kept.len() as f64;
    let xs: Vec<f64> = kept.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = kept.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::InsufficientData("all step sizes are equal".into()));
    }
    let slope = sxy / sxx;
    Ok(OrderFit {
        points: kept,
        slope,
        intercept: my - slope * mx,
    })
}

/// Settings for a sweep over adjoint step counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    #[serde(rename = "M_values")]
    pub m_values: Vec<usize>,
    #[serde(rename = "reference_M")]
    pub reference_m: usize,
    pub order: AdjointOrder,
    pub kind: SampleKind,
    pub spacing: SpacingRule,
}

/// One CSV row of a convergence sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub solver: String,
    pub order: u8,
    pub kind: SampleKind,
    #[serde(rename = "M")]
    pub m: usize,
    pub h_max: f64,
    pub err_ax: f64,
    pub err_az: f64,
    pub err_atheta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub fit_ax: OrderFit,
    /// `None` when the channel is empty (no conditioning or no parameters).
    pub fit_az: Option<OrderFit>,
    pub fit_atheta: Option<OrderFit>,
}

/// Solve the adjoint on `traj` at every `M` in the config and compare with an
/// order-2 reference at `reference_M`. Runs are independent and may execute
/// in parallel; rows come back in the order of `m_values`.
pub fn convergence_study<M: NoisePredictionModel + ?Sized>(
    model: &M,
    schedule: &VpSchedule,
    traj: &Trajectory,
    loss_grad: &[f64],
    config: &ConvergenceConfig,
    exec: Execution,
) -> Result<ConvergenceReport> {
    if config.m_values.is_empty() {
        return Err(Error::Contract(
            "convergence sweep needs at least one M".into(),
        ));
    }
    let solve_at = |m: usize, order: AdjointOrder| -> Result<(AdjointState, f64)> {
        let grid = TimeGrid::uniform(schedule, m, config.spacing)?;
        let state = solve_adjoint(model, schedule, traj, loss_grad, &grid, order, config.kind)?;
        Ok((state, grid.h_max(schedule)))
    };
    let (reference, _) = solve_at(config.reference_m, AdjointOrder::SecondMultistep)?;
    let rows = exec.try_map(config.m_values.len(), |i| {
        let m = config.m_values[i];
        let (state, h_max) = solve_at(m, config.order)?;
        Ok(ConvergenceRow {
            solver: config.order.solver_name().to_string(),
            order: config.order.as_u8(),
            kind: config.kind,
            m,
            h_max,
            err_ax: max_abs_error(&state.a_x, &reference.a_x),
            err_az: max_abs_error(&state.a_z, &reference.a_z),
            err_atheta: max_abs_error(&state.a_theta, &reference.a_theta),
        })
    })?;
    let fit = |err: fn(&ConvergenceRow) -> f64| {
        estimate_order(&rows.iter().map(|r| (r.h_max, err(r))).collect::<Vec<_>>())
    };
    Ok(ConvergenceReport {
        fit_ax: fit(|r| r.err_ax)?,
        fit_az: if model.dim_z() > 0 {
            Some(fit(|r| r.err_az)?)
        } else {
            None
        },
        fit_atheta: if model.dim_theta() > 0 {
            Some(fit(|r| r.err_atheta)?)
        } else {
            None
        },
        rows,
    })
}
