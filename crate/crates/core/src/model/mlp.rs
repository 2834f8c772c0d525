use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::schedule::VpSchedule;

use super::{check_inputs, NoisePredictionModel, VjpBundle};

/// One-hidden-layer tanh network `ε = W₂ tanh(W₁ [x, z, τ] + b₁) + b₂`.
///
/// The time feature `τ` is λ_t mapped affinely onto [−1, 1] over the
/// schedule's reachable log-SNR range. Parameters are stored flat in the
/// order `W₁` (row-major, hidden × input), `b₁`, `W₂` (row-major, d × hidden), `b₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyMlpModel {
    schedule: VpSchedule,
    d: usize,
    dim_z: usize,
    hidden: usize,
    params: Vec<f64>,
    lambda_lo: f64,
    lambda_hi: f64,
}

/// Views into the flat parameter vector.
struct Layers<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

impl TinyMlpModel {
    /// Weight scale used by [`TinyMlpModel::random`] unless overridden.
    pub const DEFAULT_INIT_SCALE: f64 = 1.0;

    pub fn param_count(d: usize, dim_z: usize, hidden: usize) -> usize {
        let input = d + dim_z + 1;
        hidden * input + hidden + d * hidden + d
    }

    pub fn from_params(
        schedule: VpSchedule,
        d: usize,
        dim_z: usize,
        hidden: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        if d == 0 || hidden == 0 {
            return Err(Error::Contract(
                "state dimension and hidden width must be positive".into(),
            ));
        }
        ensure_len(
            "mlp parameters",
            params.len(),
            Self::param_count(d, dim_z, hidden),
        )?;
        ensure_finite("mlp parameters", &params)?;
        let (lambda_lo, lambda_hi) = schedule.lambda_range();
        Ok(Self {
            schedule,
            d,
            dim_z,
            hidden,
            params,
            lambda_lo,
            lambda_hi,
        })
    }

    /// Gaussian initialisation with variance `scale² / fan_in` per weight and
    /// zero biases, drawn from a seeded ChaCha stream.
    pub fn random(
        schedule: VpSchedule,
        d: usize,
        dim_z: usize,
        hidden: usize,
        seed: u64,
        scale: f64,
    ) -> Result<Self> {
        let input = d + dim_z + 1;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut params = Vec::with_capacity(Self::param_count(d, dim_z, hidden));
        let w1_std = scale / (input as f64).sqrt();
        params.extend((0..hidden * input).map(|_| w1_std * normal.sample(&mut rng)));
        params.extend(std::iter::repeat_n(0.0, hidden));
        let w2_std = scale / (hidden as f64).sqrt();
        params.extend((0..d * hidden).map(|_| w2_std * normal.sample(&mut rng)));
        params.extend(std::iter::repeat_n(0.0, d));
        Self::from_params(schedule, d, dim_z, hidden, params)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn input_dim(&self) -> usize {
        self.d + self.dim_z + 1
    }

    fn layers(&self) -> Layers<'_> {
        let (w1, rest) = self.params.split_at(self.hidden * self.input_dim());
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.d * self.hidden);
        Layers { w1, b1, w2, b2 }
    }

    fn time_feature(&self, t: f64) -> f64 {
        let lam = self.schedule.values_raw(t).lambda;
        2.0 * (lam - self.lambda_lo) / (self.lambda_hi - self.lambda_lo) - 1.0
    }

    fn assemble_input(&self, x: &[f64], z: &[f64], t: f64) -> Vec<f64> {
        let mut u = Vec::with_capacity(self.input_dim());
        u.extend_from_slice(x);
        u.extend_from_slice(z);
        u.push(self.time_feature(t));
        u
    }

    /// Hidden activations `tanh(W₁u + b₁)`.
    fn hidden_activations(&self, layers: &Layers<'_>, u: &[f64]) -> Vec<f64> {
        let n_in = u.len();
        (0..self.hidden)
            .map(|j| {
                let row = &layers.w1[j * n_in..(j + 1) * n_in];
                let pre: f64 = row.iter().zip(u).map(|(w, v)| w * v).sum::<f64>() + layers.b1[j];
                pre.tanh()
            })
            .collect()
    }
}

impl NoisePredictionModel for TinyMlpModel {
    fn dim_x(&self) -> usize {
        self.d
    }

    fn dim_z(&self) -> usize {
        self.dim_z
    }

    fn dim_theta(&self) -> usize {
        self.params.len()
    }

    fn theta(&self) -> Vec<f64> {
        self.params.clone()
    }

    fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        Self::from_params(
            self.schedule,
            self.d,
            self.dim_z,
            self.hidden,
            theta.to_vec(),
        )
    }

    fn eps(&self, x: &[f64], z: &[f64], t: f64) -> Result<Vec<f64>> {
        check_inputs(&self.schedule, (self.d, self.dim_z), x, z, t)?;
        let layers = self.layers();
        let u = self.assemble_input(x, z, t);
        let act = self.hidden_activations(&layers, &u);
        Ok((0..self.d)
            .map(|i| {
                let row = &layers.w2[i * self.hidden..(i + 1) * self.hidden];
                row.iter().zip(&act).map(|(w, h)| w * h).sum::<f64>() + layers.b2[i]
            })
            .collect())
    }

    fn vjp(&self, a: &[f64], x: &[f64], z: &[f64], t: f64) -> Result<VjpBundle> {
        check_inputs(&self.schedule, (self.d, self.dim_z), x, z, t)?;
        ensure_len("cotangent", a.len(), self.d)?;
        let layers = self.layers();
        let u = self.assemble_input(x, z, t);
        let act = self.hidden_activations(&layers, &u);
        let n_in = u.len();
        let h = self.hidden;

        let mut vjp_theta = vec![0.0; self.params.len()];
        let (g_w1, rest) = vjp_theta.split_at_mut(h * n_in);
        let (g_b1, rest) = rest.split_at_mut(h);
        let (g_w2, g_b2) = rest.split_at_mut(self.d * h);

        // output layer
        g_b2.copy_from_slice(a);
        for i in 0..self.d {
            for j in 0..h {
                g_w2[i * h + j] = a[i] * act[j];
            }
        }

        // back through tanh
        let delta: Vec<f64> = (0..h)
            .map(|j| {
                let back: f64 = (0..self.d).map(|i| layers.w2[i * h + j] * a[i]).sum();
                back * (1.0 - act[j] * act[j])
            })
            .collect();
        g_b1.copy_from_slice(&delta);
        let mut g_u = vec![0.0; n_in];
        for j in 0..h {
            let row = &layers.w1[j * n_in..(j + 1) * n_in];
            for k in 0..n_in {
                g_w1[j * n_in + k] = delta[j] * u[k];
                g_u[k] += row[k] * delta[j];
            }
        }

        Ok(VjpBundle {
            vjp_x: g_u[..self.d].to_vec(),
            vjp_z: g_u[self.d..self.d + self.dim_z].to_vec(),
            vjp_theta,
        })
    }
}
