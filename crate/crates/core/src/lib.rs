//! Adjoint sensitivities for diffusion-model samplers.
//!
//! A VP noise schedule, noise-prediction models with exact VJPs, first-order
//! ODE/SDE samplers with full trajectory recording, the AdjointDEIS-1 and
//! AdjointDEIS-2M adjoint solvers, independent gradient oracles and a small
//! guided-generation loop.
//!
//! ```
//! use adjoint_deis::{
//!     sample, solve_adjoint, AdjointOrder, AnalyticGaussianModel, Conditioning, SampleKind,
//!     SpacingRule, TimeGrid, VpSchedule,
//! };
//!
//! let schedule = VpSchedule::default();
//! let model = AnalyticGaussianModel::new(schedule, vec![0.5, -0.5], 1.0).unwrap();
//! let grid = TimeGrid::uniform(&schedule, 32, SpacingRule::UniformLambda).unwrap();
//! let z = Conditioning::Constant(vec![0.5, -0.5]);
//! let traj = sample(&model, &schedule, &grid, &[0.1, 0.2], &z, SampleKind::Ode, 0).unwrap();
//! let grads = solve_adjoint(
//!     &model, &schedule, &traj, &[1.0, 0.0], &grid, AdjointOrder::First, SampleKind::Ode,
//! )
//! .unwrap();
//! assert_eq!(grads.a_x.len(), 2);
//! ```

pub mod adjoint;
pub mod error;
pub mod json;
pub mod model;
pub mod optimize;
pub mod oracle;
pub mod par;
pub mod sampler;
pub mod schedule;

pub use adjoint::{
    adjoint_deis_1_step, adjoint_deis_2m_step, phi1, phi2, solve_adjoint,
    solve_adjoint_scheduled_z, AdjointOrder, AdjointState, AdjointStepPlan, ScaledVjp,
    ScheduledAdjoint,
};
pub use error::{Error, Result};
pub use model::{
    AnalyticGaussianModel, AnyModel, NoisePredictionModel, TinyMlpModel, VjpBundle, ZeroModel,
};
pub use optimize::{
    guided_generate, GuidanceLoss, GuidedInputs, HistoryEntry, OptimizeConfig, OptimizeResult,
    PairLoss, TargetLoss, UpdateSet,
};
pub use oracle::{
    backprop_through_sampler, convergence_study, estimate_order, exact_linear_adjoint,
    finite_diff_grad, ConvergenceConfig, ConvergenceReport, ConvergenceRow, DiscreteGradients,
    ExactAdjoint, OrderFit,
};
pub use par::Execution;
pub use sampler::{
    cycle_sde_invert, gaussian_latent, ode_step, recover_noise, sample, sample_with_noise,
    sde_step, Conditioning, CycleInversion, NoiseSource, SampleKind, Trajectory,
};
pub use schedule::{SpacingRule, TimeGrid, VpSchedule};
