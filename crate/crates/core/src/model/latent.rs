//! Diagonal Gaussian latents and their reparameterised sampling.

use clasp_autodiff::{Float, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Bounds on the standard deviation, applied to the log-stddev head.
pub const MIN_STD: f64 = 1e-6;
pub const MAX_STD: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLatent {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianLatent {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Config(format!("mean of dim {} with stddev of dim {}", mean.len(), std.len())));
        }
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Numerical("non-positive standard deviation".into()));
        }
        Ok(Self { mean, std })
    }

    /// From an unconstrained log-stddev, clamped to the allowed range.
    pub fn from_log_std(mean: Vec<f64>, log_std: &[f64]) -> Result<Self> {
        let std = log_std.iter().map(|l| l.clamp(MIN_STD.ln(), MAX_STD.ln()).exp()).collect();
        Self::new(mean, std)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `mean + std * eps`.
    pub fn sample(&self, eps: &[f64]) -> Vec<f64> {
        self.mean.iter().zip(&self.std).zip(eps).map(|((m, s), e)| m + s * e).collect()
    }

    /// Closed-form KL divergence to the standard normal.
    pub fn kl_to_prior(&self) -> f64 {
        self.mean.iter().zip(&self.std).map(|(m, s)| 0.5 * (m * m + s * s - 1.0) - s.ln()).sum()
    }
}

/// A latent fed to the recurrent core, with the bit telling single-step
/// latents (0) from composed trajectory latents (1).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentInput {
    pub vector: Vec<f64>,
    pub indicator: u8,
}

impl LatentInput {
    pub fn step(vector: Vec<f64>) -> Self {
        Self { vector, indicator: 0 }
    }

    pub fn trajectory(vector: Vec<f64>) -> Self {
        Self { vector, indicator: 1 }
    }
}

/// Splits a `[N, 2d]` head into mean and clamped log-stddev.
pub fn gaussian_head<F: Float>(g: &mut Graph<F>, out: Var, d: usize) -> Result<(Var, Var)> {
    let mu = g.slice_cols(out, 0, d)?;
    let raw = g.slice_cols(out, d, d)?;
    let ls = g.clamp(raw, F::from_f64_lossy(MIN_STD.ln()), F::from_f64_lossy(MAX_STD.ln()));
    Ok((mu, ls))
}

/// Differentiable `mu + exp(log_std) * eps`.
pub fn reparameterize<F: Float>(g: &mut Graph<F>, mu: Var, log_std: Var, eps: Tensor<F>) -> Result<Var> {
    let e = g.input(eps);
    let s = g.exp(log_std);
    let se = g.mul(s, e)?;
    Ok(g.add(mu, se)?)
}
