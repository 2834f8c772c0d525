use crate::error::{ensure_len, Result};
use crate::schedule::VpSchedule;

use super::{check_inputs, NoisePredictionModel, VjpBundle};

/// `ε ≡ 0`, with no parameters. Isolates the linear part of every update.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroModel {
    schedule: VpSchedule,
    d: usize,
    dim_z: usize,
}

impl ZeroModel {
    pub fn new(schedule: VpSchedule, d: usize, dim_z: usize) -> Self {
        Self { schedule, d, dim_z }
    }
}

impl NoisePredictionModel for ZeroModel {
    fn dim_x(&self) -> usize {
        self.d
    }

    fn dim_z(&self) -> usize {
        self.dim_z
    }

    fn dim_theta(&self) -> usize {
        0
    }

    fn theta(&self) -> Vec<f64> {
        Vec::new()
    }

    fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        ensure_len("theta", theta.len(), 0)?;
        Ok(self.clone())
    }

    fn eps(&self, x: &[f64], z: &[f64], t: f64) -> Result<Vec<f64>> {
        check_inputs(&self.schedule, (self.d, self.dim_z), x, z, t)?;
        Ok(vec![0.0; self.d])
    }

    fn vjp(&self, a: &[f64], x: &[f64], z: &[f64], t: f64) -> Result<VjpBundle> {
        check_inputs(&self.schedule, (self.d, self.dim_z), x, z, t)?;
        ensure_len("cotangent", a.len(), self.d)?;
        Ok(VjpBundle::zeros(self.d, self.dim_z, 0))
    }
}
