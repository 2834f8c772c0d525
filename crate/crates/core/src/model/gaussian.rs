use crate::error::{ensure_len, Error, Result};
use crate::schedule::VpSchedule;

use super::{check_inputs, NoisePredictionModel, VjpBundle};

/// Exact scaled score for data distributed as `N(μ, c²I)`.
///
/// `ε(x, μ, t) = σ_t (x − α_t μ) / (α_t² c² + σ_t²)`. The mean `μ` is fed in
/// as the conditioning `z` and the scale `c` is the single parameter `θ`, so
/// every adjoint channel has a closed-form reference.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticGaussianModel {
    schedule: VpSchedule,
    mu: Vec<f64>,
    c: f64,
}

impl AnalyticGaussianModel {
    pub fn new(schedule: VpSchedule, mu: Vec<f64>, c: f64) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::Contract("mean vector must be non-empty".into()));
        }
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::Domain(format!(
                "data scale c must be positive, got {c}"
            )));
        }
        Ok(Self { schedule, mu, c })
    }

    /// Default conditioning: the mean the model was built with.
    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn schedule(&self) -> &VpSchedule {
        &self.schedule
    }
}

impl NoisePredictionModel for AnalyticGaussianModel {
    fn dim_x(&self) -> usize {
        self.mu.len()
    }

    fn dim_z(&self) -> usize {
        self.mu.len()
    }

    fn dim_theta(&self) -> usize {
        1
    }

    fn theta(&self) -> Vec<f64> {
        vec![self.c]
    }

    fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        ensure_len("theta", theta.len(), 1)?;
        Self::new(self.schedule, self.mu.clone(), theta[0])
    }

    fn eps(&self, x: &[f64], z: &[f64], t: f64) -> Result<Vec<f64>> {
        check_inputs(&self.schedule, (self.dim_x(), self.dim_z()), x, z, t)?;
        let v = self.schedule.values_raw(t);
        let denom = v.alpha * v.alpha * self.c * self.c + v.sigma * v.sigma;
        Ok(x.iter()
            .zip(z)
            .map(|(xi, zi)| v.sigma * (xi - v.alpha * zi) / denom)
            .collect())
    }

    fn vjp(&self, a: &[f64], x: &[f64], z: &[f64], t: f64) -> Result<VjpBundle> {
        check_inputs(&self.schedule, (self.dim_x(), self.dim_z()), x, z, t)?;
        ensure_len("cotangent", a.len(), self.dim_x())?;
        let v = self.schedule.values_raw(t);
        let a2c2 = v.alpha * v.alpha * self.c * self.c;
        let denom = a2c2 + v.sigma * v.sigma;
        let gain = v.sigma / denom;
        let vjp_x = a.iter().map(|ai| gain * ai).collect();
        let vjp_z = a.iter().map(|ai| -gain * v.alpha * ai).collect();
        // ∂ε/∂c = −σ (x − αμ) · 2α²c / denom²
        let proj: f64 = a
            .iter()
            .zip(x.iter().zip(z))
            .map(|(ai, (xi, zi))| ai * (xi - v.alpha * zi))
            .sum();
        let dc = -gain * proj * 2.0 * v.alpha * v.alpha * self.c / denom;
        Ok(VjpBundle {
            vjp_x,
            vjp_z,
            vjp_theta: vec![dc],
        })
    }

    fn as_analytic(&self) -> Option<&AnalyticGaussianModel> {
        Some(self)
    }
}
