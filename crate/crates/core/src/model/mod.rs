//! Noise-prediction models `ε_θ(x, z, t)` with exact vector-Jacobian products.
//!
//! Every model exposes reverse-mode products with respect to the state `x`,
//! the conditioning `z` and the flattened parameter vector `θ`, so the
//! adjoint solvers never need an external autodiff engine.

mod gaussian;
mod mlp;
mod zero;

pub use gaussian::AnalyticGaussianModel;
pub use mlp::TinyMlpModel;
pub use zero::ZeroModel;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::schedule::{VpSchedule, T_END};

/// Unscaled products `aᵀ∂ε/∂x`, `aᵀ∂ε/∂z` and `aᵀ∂ε/∂θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VjpBundle {
    pub vjp_x: Vec<f64>,
    pub vjp_z: Vec<f64>,
    pub vjp_theta: Vec<f64>,
}

impl VjpBundle {
    pub fn zeros(dim_x: usize, dim_z: usize, dim_theta: usize) -> Self {
        Self {
            vjp_x: vec![0.0; dim_x],
            vjp_z: vec![0.0; dim_z],
            vjp_theta: vec![0.0; dim_theta],
        }
    }
}

pub trait NoisePredictionModel: Send + Sync {
    fn dim_x(&self) -> usize;
    fn dim_z(&self) -> usize;
    fn dim_theta(&self) -> usize;

    /// Current flattened parameters.
    fn theta(&self) -> Vec<f64>;

    /// Copy of the model with parameters replaced by `theta`.
    fn with_theta(&self, theta: &[f64]) -> Result<Self>
    where
        Self: Sized;

    fn eps(&self, x: &[f64], z: &[f64], t: f64) -> Result<Vec<f64>>;

    /// Reverse-mode products of the cotangent `a` with the three Jacobians of ε.
    fn vjp(&self, a: &[f64], x: &[f64], z: &[f64], t: f64) -> Result<VjpBundle>;

    /// Closed-form Gaussian model, if this is one. Used by the exact-adjoint oracle.
    fn as_analytic(&self) -> Option<&AnalyticGaussianModel> {
        None
    }
}

pub(crate) fn check_inputs(
    schedule: &VpSchedule,
    dims: (usize, usize),
    x: &[f64],
    z: &[f64],
    t: f64,
) -> Result<()> {
    ensure_len("state x", x.len(), dims.0)?;
    ensure_len("conditioning z", z.len(), dims.1)?;
    if !(t >= schedule.t_eps && t <= T_END) {
        return Err(Error::Domain(format!(
            "model time {t} outside [{}, 1]",
            schedule.t_eps
        )));
    }
    Ok(())
}

/// The two configurable model families behind one concrete type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Gaussian(AnalyticGaussianModel),
    Mlp(TinyMlpModel),
}

impl NoisePredictionModel for AnyModel {
    fn dim_x(&self) -> usize {
        match self {
            AnyModel::Gaussian(m) => m.dim_x(),
            AnyModel::Mlp(m) => m.dim_x(),
        }
    }

    fn dim_z(&self) -> usize {
        match self {
            AnyModel::Gaussian(m) => m.dim_z(),
            AnyModel::Mlp(m) => m.dim_z(),
        }
    }

    fn dim_theta(&self) -> usize {
        match self {
            AnyModel::Gaussian(m) => m.dim_theta(),
            AnyModel::Mlp(m) => m.dim_theta(),
        }
    }

    fn theta(&self) -> Vec<f64> {
        match self {
            AnyModel::Gaussian(m) => m.theta(),
            AnyModel::Mlp(m) => m.theta(),
        }
    }

    fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        Ok(match self {
            AnyModel::Gaussian(m) => AnyModel::Gaussian(m.with_theta(theta)?),
            AnyModel::Mlp(m) => AnyModel::Mlp(m.with_theta(theta)?),
        })
    }

    fn eps(&self, x: &[f64], z: &[f64], t: f64) -> Result<Vec<f64>> {
        match self {
            AnyModel::Gaussian(m) => m.eps(x, z, t),
            AnyModel::Mlp(m) => m.eps(x, z, t),
        }
    }

    fn vjp(&self, a: &[f64], x: &[f64], z: &[f64], t: f64) -> Result<VjpBundle> {
        match self {
            AnyModel::Gaussian(m) => m.vjp(a, x, z, t),
            AnyModel::Mlp(m) => m.vjp(a, x, z, t),
        }
    }

    fn as_analytic(&self) -> Option<&AnalyticGaussianModel> {
        match self {
            AnyModel::Gaussian(m) => Some(m),
            AnyModel::Mlp(_) => None,
        }
    }
}
