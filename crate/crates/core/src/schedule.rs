//! Variance-preserving noise schedule with a linear β(t).
//!
//! `log α_t = −(β₁−β₀)/4·t² − β₀/2·t`, `σ_t = √(1−α_t²)` and the half log-SNR
//! `λ_t = log(α_t/σ_t)`. Everything here is a pure function of an immutable
//! [`VpSchedule`], so a schedule can be shared freely between threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Terminal diffusion time. Fixed to the usual VP convention.
pub const T_END: f64 = 1.0;

/// Tolerance in λ used by the inversion fallback.
const LAMBDA_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VpSchedule {
    pub beta0: f64,
    pub beta1: f64,
    /// Smallest time a grid may reach; σ_t vanishes at 0 so λ is singular there.
    pub t_eps: f64,
}

impl Default for VpSchedule {
    fn default() -> Self {
        Self {
            beta0: 0.1,
            beta1: 20.0,
            t_eps: 1e-3,
        }
    }
}

/// α, σ and λ evaluated together at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub lambda: f64,
}

impl VpSchedule {
    pub fn new(beta0: f64, beta1: f64, t_eps: f64) -> Result<Self> {
        let schedule = Self {
            beta0,
            beta1,
            t_eps,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta0.is_finite() && self.beta0 > 0.0) {
            return Err(Error::Domain(format!(
                "beta0 must be positive, got {}",
                self.beta0
            )));
        }
        if !(self.beta1.is_finite() && self.beta1 >= self.beta0) {
            return Err(Error::Domain(format!(
                "beta1 must be >= beta0, got {}",
                self.beta1
            )));
        }
        if !(self.t_eps > 0.0 && self.t_eps < T_END) {
            return Err(Error::Domain(format!(
                "t_eps must lie in (0, 1), got {}",
                self.t_eps
            )));
        }
        Ok(())
    }

    fn check_unit(t: f64) -> Result<()> {
        if !(0.0..=T_END).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        Ok(())
    }

    fn check_positive(t: f64, what: &str) -> Result<()> {
        Self::check_unit(t)?;
        if t == 0.0 {
            return Err(Error::Singularity(format!("{what} is singular at t = 0")));
        }
        Ok(())
    }

    /// β(t) = β₀ + (β₁−β₀)t.
    fn beta(&self, t: f64) -> f64 {
        self.beta0 + (self.beta1 - self.beta0) * t
    }

    pub(crate) fn log_alpha_raw(&self, t: f64) -> f64 {
        -(self.beta1 - self.beta0) / 4.0 * t * t - self.beta0 / 2.0 * t
    }

    pub(crate) fn values_raw(&self, t: f64) -> ScheduleValues {
        let log_alpha = self.log_alpha_raw(t);
        let alpha = log_alpha.exp();
        // σ² = 1 − α² = −expm1(2 log α), accurate near t = 0
        let sigma_sq = -(2.0 * log_alpha).exp_m1();
        let sigma = sigma_sq.sqrt();
        let lambda = log_alpha - 0.5 * sigma_sq.ln();
        ScheduleValues {
            t,
            alpha,
            sigma,
            lambda,
        }
    }

    pub fn log_alpha(&self, t: f64) -> Result<f64> {
        Self::check_unit(t)?;
        Ok(self.log_alpha_raw(t))
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        Ok(self.log_alpha(t)?.exp())
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        Self::check_unit(t)?;
        Ok(self.values_raw(t).sigma)
    }

    pub fn lambda(&self, t: f64) -> Result<f64> {
        Self::check_positive(t, "lambda")?;
        Ok(self.values_raw(t).lambda)
    }

    /// α, σ and λ at `t`; requires `t ∈ (0, 1]`.
    pub fn values(&self, t: f64) -> Result<ScheduleValues> {
        Self::check_positive(t, "lambda")?;
        Ok(self.values_raw(t))
    }

    /// `(λ(1), λ(t_eps))`, the smallest and largest reachable log-SNR.
    pub fn lambda_range(&self) -> (f64, f64) {
        (
            self.values_raw(T_END).lambda,
            self.values_raw(self.t_eps).lambda,
        )
    }

    /// Inverse of [`VpSchedule::lambda`] on `[t_eps, 1]`.
    ///
    /// Solves the quadratic `A t² + B t + log α = 0` for the log-amplitude
    /// implied by `lam`, then falls back to bisection if the root does not
    /// reproduce `lam` to within 1e−10.
    pub fn t_of_lambda(&self, lam: f64) -> Result<f64> {
        let (lo, hi) = self.lambda_range();
        if !lam.is_finite() || lam < lo - LAMBDA_TOL || lam > hi + LAMBDA_TOL {
            return Err(Error::Domain(format!("lambda {lam} outside [{lo}, {hi}]")));
        }
        let lam = lam.clamp(lo, hi);
        if lam == hi {
            return Ok(self.t_eps);
        }
        if lam == lo {
            return Ok(T_END);
        }

        // log α = −½ log(1 + e^{−2λ})
        let log_alpha = -0.5 * softplus(-2.0 * lam);
        let a = (self.beta1 - self.beta0) / 4.0;
        let b = self.beta0 / 2.0;
        // stable root of a t² + b t + log α = 0 with log α ≤ 0
        let t = -2.0 * log_alpha / (b + (b * b - 4.0 * a * log_alpha).sqrt());
        if t.is_finite()
            && (self.t_eps..=T_END).contains(&t)
            && (self.values_raw(t).lambda - lam).abs() <= 1e-10
        {
            return Ok(t);
        }
        Ok(self.bisect_lambda(lam))
    }

    fn bisect_lambda(&self, lam: f64) -> f64 {
        let (mut left, mut right) = (self.t_eps, T_END);
        for _ in 0..200 {
            let mid = 0.5 * (left + right);
            let value = self.values_raw(mid).lambda;
            if (value - lam).abs() <= LAMBDA_TOL {
                return mid;
            }
            // λ decreases in t
            if value > lam {
                left = mid;
            } else {
                right = mid;
            }
        }
        0.5 * (left + right)
    }

    /// Drift coefficient `f(t) = d log α_t / dt`.
    pub fn drift_coeff(&self, t: f64) -> Result<f64> {
        Self::check_positive(t, "drift coefficient")?;
        Ok(-(self.beta1 - self.beta0) / 2.0 * t - self.beta0 / 2.0)
    }

    /// Squared diffusion coefficient `g²(t) = dσ_t²/dt − 2 f(t) σ_t²`.
    pub fn diffusion_coeff_sq(&self, t: f64) -> Result<f64> {
        Self::check_positive(t, "diffusion coefficient")?;
        let log_alpha = self.log_alpha_raw(t);
        let alpha_sq = (2.0 * log_alpha).exp();
        let sigma_sq = -(2.0 * log_alpha).exp_m1();
        let beta = self.beta(t);
        // dσ²/dt = β(t)·α² and −2 f σ² = β(t)·σ²
        Ok(beta * alpha_sq + beta * sigma_sq)
    }

    /// `dλ/dt = f(t) − ½ dσ²/dt / σ²`, strictly negative on (0, 1].
    pub fn dlambda_dt(&self, t: f64) -> Result<f64> {
        let f = self.drift_coeff(t)?;
        let v = self.values_raw(t);
        let dsigma_sq = self.beta(t) * v.alpha * v.alpha;
        Ok(f - 0.5 * dsigma_sq / (v.sigma * v.sigma))
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// How grid points are distributed between `t_eps` and 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SpacingRule {
    #[default]
    #[serde(rename = "uniform-t")]
    UniformT,
    #[serde(rename = "uniform-lambda")]
    UniformLambda,
    /// Explicit list of times supplied by the caller.
    #[serde(rename = "custom")]
    Custom,
}

/// Strictly increasing times `t_0 < … < t_N` inside `[t_eps, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    times: Vec<f64>,
    spacing: SpacingRule,
}

impl TimeGrid {
    /// `n_steps + 1` points from `t_eps` to 1 following `rule`.
    pub fn uniform(schedule: &VpSchedule, n_steps: usize, rule: SpacingRule) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Contract("a grid needs at least one step".into()));
        }
        let t_eps = schedule.t_eps;
        let mut times = Vec::with_capacity(n_steps + 1);
        match rule {
            SpacingRule::UniformT => {
                for i in 0..=n_steps {
                    let frac = i as f64 / n_steps as f64;
                    times.push(t_eps + (T_END - t_eps) * frac);
                }
            }
            SpacingRule::UniformLambda => {
                let (lam_end, lam_start) = schedule.lambda_range();
                for i in 0..=n_steps {
                    let frac = i as f64 / n_steps as f64;
                    let lam = lam_start + (lam_end - lam_start) * frac;
                    times.push(schedule.t_of_lambda(lam)?);
                }
            }
            SpacingRule::Custom => {
                return Err(Error::Contract(
                    "custom spacing requires explicit times".into(),
                ))
            }
        }
        times[0] = t_eps;
        times[n_steps] = T_END;
        Self::validated(times, rule, schedule)
    }

    /// Wrap caller-supplied times after checking ordering and range.
    pub fn from_times(times: Vec<f64>, schedule: &VpSchedule) -> Result<Self> {
        Self::validated(times, SpacingRule::Custom, schedule)
    }

    fn validated(times: Vec<f64>, spacing: SpacingRule, schedule: &VpSchedule) -> Result<Self> {
        let grid = Self { times, spacing };
        grid.validate(schedule)?;
        Ok(grid)
    }

    /// Re-check invariants, e.g. after deserialization.
    pub fn validate(&self, schedule: &VpSchedule) -> Result<()> {
        if self.times.len() < 2 {
            return Err(Error::Contract("a grid needs at least 2 points".into()));
        }
        for (i, &t) in self.times.iter().enumerate() {
            if !t.is_finite() || t < schedule.t_eps || t > T_END {
                return Err(Error::Contract(format!(
                    "grid point {i} = {t} outside [{}, 1]",
                    schedule.t_eps
                )));
            }
        }
        if let Some(i) = self.times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Contract(format!(
                "grid is not strictly increasing at index {}: {} then {}",
                i + 1,
                self.times[i],
                self.times[i + 1]
            )));
        }
        Ok(())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn spacing(&self) -> SpacingRule {
        self.spacing
    }

    /// Number of steps (intervals).
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Largest log-SNR gap between neighbouring points.
    pub fn h_max(&self, schedule: &VpSchedule) -> f64 {
        self.times
            .windows(2)
            .map(|w| schedule.values_raw(w[0]).lambda - schedule.values_raw(w[1]).lambda)
            .fold(0.0, f64::max)
    }

    /// Index `k` of the interval `[t_k, t_{k+1})` containing `t`; the final
    /// point belongs to the last interval.
    pub fn interval_of(&self, t: f64) -> Option<usize> {
        if t < self.start() || t > self.end() {
            return None;
        }
        let n = self.n_steps();
        let k = self.times.partition_point(|&x| x <= t);
        Some(k.saturating_sub(1).min(n - 1))
    }
}
