//! Diagonal Gaussians and the categorical relaxation used by VRAE-mi.
//!
//! All reductions are over the last axis, so a `[groups, batch, n]` pair of
//! parameter tensors yields `[groups, batch]` scalars.

use crate::nn::ops;
use candle_core::{Result, Tensor, D};
use std::f64::consts::PI;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub log_var: Tensor,
}

impl GaussianParams {
    pub fn new(mean: Tensor, log_var: Tensor) -> Result<Self> {
        if mean.dims() != log_var.dims() {
            candle_core::bail!("mean {:?} and log-variance {:?} differ in shape", mean.dims(), log_var.dims());
        }
        Ok(Self { mean, log_var })
    }

    /// Splits a head output `[.., 2n]` into mean and clamped log-variance.
    pub fn from_head(raw: &Tensor) -> Result<Self> {
        let n = raw.dim(D::Minus1)? / 2;
        let mean = raw.narrow(D::Minus1, 0, n)?;
        let log_var = raw.narrow(D::Minus1, n, n)?.clamp(LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(Self { mean, log_var })
    }

    pub fn dim(&self) -> Result<usize> {
        self.mean.dim(D::Minus1)
    }

    pub fn std(&self) -> Result<Tensor> {
        (&self.log_var * 0.5)?.exp()
    }

    pub fn detach(&self) -> Self {
        Self { mean: self.mean.detach(), log_var: self.log_var.detach() }
    }
}

/// `z = mean + exp(log_var / 2) * noise`.
pub fn reparam_sample(p: &GaussianParams, noise: &Tensor) -> Result<Tensor> {
    if noise.dims() != p.mean.dims() {
        candle_core::bail!("noise shape {:?} does not match parameters {:?}", noise.dims(), p.mean.dims());
    }
    &p.mean + (p.std()? * noise)?
}

/// Closed-form `KL(q || p)` summed over the last axis.
pub fn kl_diag_gaussian(q: &GaussianParams, p: &GaussianParams) -> Result<Tensor> {
    if q.mean.dims() != p.mean.dims() {
        candle_core::bail!("KL between shapes {:?} and {:?}", q.mean.dims(), p.mean.dims());
    }
    let diff = (&q.mean - &p.mean)?;
    let ratio = ((q.log_var.exp()? + diff.sqr()?)? / p.log_var.exp()?)?;
    let per_dim = ((&p.log_var - &q.log_var)? + ratio)?.affine(0.5, -0.5)?;
    per_dim.sum(D::Minus1)
}

/// Log density of `x` under a diagonal Gaussian, summed over the last axis.
pub fn gaussian_log_density(x: &Tensor, p: &GaussianParams) -> Result<Tensor> {
    if x.dims() != p.mean.dims() {
        candle_core::bail!("point shape {:?} does not match parameters {:?}", x.dims(), p.mean.dims());
    }
    let sq = ((x - &p.mean)?.sqr()? / p.log_var.exp()?)?;
    let per_dim = (sq + &p.log_var)?.affine(-0.5, -0.5 * (2.0 * PI).ln())?;
    per_dim.sum(D::Minus1)
}

/// Entropy of a diagonal Gaussian, summed over the last axis.
pub fn gaussian_entropy(p: &GaussianParams) -> Result<Tensor> {
    p.log_var.affine(0.5, 0.5 * (1.0 + (2.0 * PI).ln()))?.sum(D::Minus1)
}

/// Relaxed one-hot sample `softmax((logits + gumbel) / tau)`.
pub fn gumbel_softmax(logits: &Tensor, tau: f64, gumbel: &Tensor) -> Result<Tensor> {
    if !(tau > 0.0) {
        candle_core::bail!("gumbel-softmax temperature must be positive, got {tau}");
    }
    ops::softmax(&((logits + gumbel)? / tau)?)
}

/// Converts uniform draws in (0, 1) to standard Gumbel draws.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.max(f64::MIN_POSITIVE).ln()).ln()
}
