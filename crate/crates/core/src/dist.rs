//! Log-densities and reparameterized samplers.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{log_sigmoid, sigmoid, softplus};
use crate::noise::Noise;

const HALF_LOG_TAU: f64 = 0.918_938_533_204_672_8; // ½·ln(2π)

/// Diagonal Gaussian log-density summed over the last dimension.
pub fn normal_log_prob(x: &Tensor, mean: &Tensor, std: &Tensor) -> Result<Tensor> {
    let z = ((x - mean)? / std)?;
    let per = ((z.sqr()? * -0.5)? - std.log()?)?;
    Ok((per.sum(D::Minus1)? - HALF_LOG_TAU * x.dim(D::Minus1)? as f64)?)
}

/// Elementwise Bernoulli log-mass `z·log p + (1 - z)·log(1 - p)` with
/// `p = σ(logits)`. For relaxed `z ∈ (0, 1)` this is the usual smooth
/// surrogate.
pub fn bernoulli_log_prob(z: &Tensor, logits: &Tensor) -> Result<Tensor> {
    let log_p = log_sigmoid(logits)?;
    let log_not_p = log_sigmoid(&logits.neg()?)?;
    Ok(((z * log_p)? + ((1.0 - z)? * log_not_p)?)?)
}

/// Strictly positive standard deviation from an unconstrained value.
pub fn positive_std(raw: &Tensor, floor: f64) -> Result<Tensor> {
    Ok((softplus(raw)? + floor)?)
}

pub fn reparameterize(mean: &Tensor, std: &Tensor, noise: &mut Noise) -> Result<Tensor> {
    let eps = noise.normal(mean.dims())?;
    Ok((mean + (std * eps)?)?)
}

/// How binary presence variables are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PresenceMode {
    /// Exact {0, 1} sample in the forward pass, binary-concrete gradient in
    /// the backward pass.
    StraightThrough { temperature: f64 },
    /// Binary-concrete sample in (0, 1) for both passes.
    Relaxed { temperature: f64 },
    /// Exact {0, 1} sample, no gradient path through the sample.
    Hard,
}

impl PresenceMode {
    pub fn is_discrete(&self) -> bool {
        !matches!(self, PresenceMode::Relaxed { .. })
    }
}

/// Draws presence samples from Bernoulli(σ(logits)) via logistic noise:
/// the hard value is `[logits + L > 0]`, the relaxed value `σ((logits + L)/τ)`.
pub fn sample_presence(logits: &Tensor, noise: &mut Noise, mode: PresenceMode) -> Result<Tensor> {
    let l = noise.logistic(logits.dims())?;
    let shifted = (logits + l)?;
    let hard = || -> Result<Tensor> { Ok(shifted.gt(0.0)?.to_dtype(logits.dtype())?) };
    match mode {
        PresenceMode::Hard => hard().map(|h| h.detach()),
        PresenceMode::Relaxed { temperature } => sigmoid(&(shifted / temperature)?),
        PresenceMode::StraightThrough { temperature } => {
            let soft = sigmoid(&(&shifted / temperature)?)?;
            Ok(((hard()? + &soft)? - soft.detach())?)
        }
    }
}
