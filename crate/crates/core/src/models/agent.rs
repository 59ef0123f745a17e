//! Recurrent agent models with per-timestep latents.
//!
//! One implementation covers every VRNN-style variant. They differ only in
//! how recurrences and output heads are grouped:
//!
//! | variant       | recurrences | heads | latent per head | decoder sees `g` |
//! |---------------|-------------|-------|-----------------|------------------|
//! | rnn-gauss     | 1           | 1     | none            | no               |
//! | vrnn-single   | 1           | 1     | yes             | no               |
//! | vrnn-mixed    | 1 (shared)  | K     | yes             | no               |
//! | vrnn-indep    | K           | K     | yes             | no               |
//! | hierarchical  | K           | K     | yes             | yes              |
//!
//! Time is 0-indexed. Step `t` reads `h_{t-1}` (zero for `t = 0`):
//! prior `p(z_t | h)`, encoder `q(z_t | x_t, h)`, decoder
//! `p(x_t | z_t, h[, g_t])`, then `h_t = GRU([x_t, z_t], h_{t-1})`. Every
//! recurrence reads the joint state of all agents.
//!
//! Per-step tensors use the layout `[B, K*d]` for states and `[B, K*C]` for
//! stacked one-hot macro-intents; model internals are `[groups, B, n]`.

use super::gaussian::{gaussian_log_density, kl_diag_gaussian, reparam_sample, GaussianParams};
use super::{ModelConfig, ModelError, Variant};
use crate::nn::{Gru, Mlp, ParamBuilder};
use candle_core::{DType, Device, Result as CResult, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone)]
pub struct AgentModel {
    variant: Variant,
    agents: usize,
    dim: usize,
    latent: usize,
    rec_groups: usize,
    head_groups: usize,
    macro_dim: usize,
    rnn: Gru,
    prior: Option<Mlp>,
    encoder: Option<Mlp>,
    decoder: Mlp,
    dtype: DType,
}

/// Recurrent state: one `[groups, B, width]` tensor per layer.
#[derive(Clone, Debug)]
pub struct AgentState {
    pub h: Vec<Tensor>,
}

/// Per-sequence pieces of the sequential ELBO, each `[B]`.
#[derive(Clone, Debug)]
pub struct ElboTerms {
    pub elbo: Tensor,
    pub reconstruction: Tensor,
    pub kl: Tensor,
}

fn expand(t: &Tensor, groups: usize) -> CResult<Tensor> {
    let (g, b, n) = t.dims3()?;
    if g == groups {
        Ok(t.clone())
    } else {
        t.broadcast_as((groups, b, n))?.contiguous()
    }
}

/// Draws standard normal noise of the given shape.
pub fn normal_noise<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], dtype: DType) -> CResult<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)
}

impl AgentModel {
    pub(crate) fn new(config: &ModelConfig, pb: &mut ParamBuilder) -> CResult<Self> {
        let (k, d) = (config.agents, config.dim);
        let variant = config.variant;
        let (rec_groups, head_groups) = match variant {
            Variant::RnnGauss | Variant::VrnnSingle => (1, 1),
            Variant::VrnnMixed => (1, k),
            Variant::VrnnIndep | Variant::Hierarchical => (k, k),
            Variant::VraeMi => candle_core::bail!("vrae-mi is not a per-step agent model"),
        };
        let latent = if variant == Variant::RnnGauss { 0 } else { config.latent_dim };
        let macro_dim = if variant == Variant::Hierarchical { k * config.macro_categories } else { 0 };
        let head_x = if head_groups == k { d } else { k * d };
        let h = config.rnn_width;
        let hidden = [config.mlp_width, config.mlp_width];
        let rec_latent = if rec_groups == head_groups { latent } else { head_groups * latent };
        let rnn = Gru::new(pb, "agent.rnn", rec_groups, k * d + rec_latent, h, config.rnn_layers)?;
        let (prior, encoder) = if latent > 0 {
            (
                Some(Mlp::new(pb, "agent.prior", head_groups, h, &hidden, 2 * latent)?),
                Some(Mlp::new(pb, "agent.enc", head_groups, head_x + h, &hidden, 2 * latent)?),
            )
        } else {
            (None, None)
        };
        let decoder = Mlp::new(pb, "agent.dec", head_groups, latent + h + macro_dim, &hidden, 2 * head_x)?;
        Ok(Self {
            variant,
            agents: k,
            dim: d,
            latent,
            rec_groups,
            head_groups,
            macro_dim,
            rnn,
            prior,
            encoder,
            decoder,
            dtype: pb.dtype(),
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn latent_dim(&self) -> usize {
        self.latent
    }

    pub fn head_groups(&self) -> usize {
        self.head_groups
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn has_latents(&self) -> bool {
        self.latent > 0
    }

    pub fn zero_state(&self, batch: usize) -> CResult<AgentState> {
        Ok(AgentState { h: self.rnn.zero_state(batch, self.dtype)? })
    }

    /// Shape of the latent noise for one step.
    pub fn latent_shape(&self, batch: usize) -> [usize; 3] {
        [self.head_groups, batch, self.latent]
    }

    /// `[B, K*d]` joint state to the per-head layout `[heads, B, n]`.
    fn head_view(&self, x: &Tensor) -> CResult<Tensor> {
        let b = x.dim(0)?;
        if self.head_groups == 1 {
            x.unsqueeze(0)
        } else {
            x.reshape((b, self.agents, self.dim))?.transpose(0, 1)?.contiguous()
        }
    }

    /// Inverse of [`Self::head_view`].
    pub fn joint_view(&self, per_head: &Tensor) -> CResult<Tensor> {
        let (_, b, _) = per_head.dims3()?;
        if self.head_groups == 1 {
            per_head.squeeze(0)
        } else {
            per_head.transpose(0, 1)?.contiguous()?.reshape((b, self.agents * self.dim))
        }
    }

    fn summary(&self, st: &AgentState) -> CResult<Tensor> {
        expand(st.h.last().expect("at least one layer"), self.head_groups)
    }

    pub fn prior(&self, st: &AgentState) -> CResult<Option<GaussianParams>> {
        match &self.prior {
            Some(net) => Ok(Some(GaussianParams::from_head(&net.forward(&self.summary(st)?)?)?)),
            None => Ok(None),
        }
    }

    pub fn encode(&self, x: &Tensor, st: &AgentState) -> CResult<Option<GaussianParams>> {
        match &self.encoder {
            Some(net) => {
                let input = Tensor::cat(&[&self.head_view(x)?, &self.summary(st)?], 2)?;
                Ok(Some(GaussianParams::from_head(&net.forward(&input)?)?))
            }
            None => Ok(None),
        }
    }

    /// Output distribution over the next state, per head. `g` must be given
    /// exactly when the model is hierarchical.
    pub fn decode(&self, z: Option<&Tensor>, st: &AgentState, g: Option<&Tensor>) -> Result<GaussianParams, ModelError> {
        let mut parts = Vec::with_capacity(3);
        match (z, self.latent > 0) {
            (Some(z), true) => parts.push(z.clone()),
            (None, false) => {}
            (Some(_), false) => return Err(ModelError::Input("model has no latent variables".into())),
            (None, true) => return Err(ModelError::Input("decoder needs a latent sample".into())),
        }
        parts.push(self.summary(st)?);
        match (g, self.macro_dim > 0) {
            (Some(g), true) => {
                if g.dims2()?.1 != self.macro_dim {
                    return Err(ModelError::Input(format!("macro-intent input must have {} entries", self.macro_dim)));
                }
                parts.push(expand(&g.unsqueeze(0)?, self.head_groups)?);
            }
            (None, false) => {}
            (Some(_), false) => return Err(ModelError::Input("only the hierarchical model takes macro-intents".into())),
            (None, true) => return Err(ModelError::MissingMacroIntents),
        }
        let input = Tensor::cat(&parts, 2)?;
        Ok(GaussianParams::from_head(&self.decoder.forward(&input)?)?)
    }

    pub fn recurrence(&self, x: &Tensor, z: Option<&Tensor>, st: &AgentState) -> CResult<AgentState> {
        let xj = x.unsqueeze(0)?;
        let input = match z {
            None => xj,
            Some(z) if self.rec_groups == self.head_groups => Tensor::cat(&[&expand(&xj, self.rec_groups)?, z], 2)?,
            Some(z) => {
                let b = z.dim(1)?;
                let flat = z.transpose(0, 1)?.contiguous()?.reshape((1, b, self.head_groups * self.latent))?;
                Tensor::cat(&[&xj, &flat], 2)?
            }
        };
        Ok(AgentState { h: self.rnn.step(&input, &st.h)? })
    }

    /// Monte Carlo sequential ELBO with `samples` latent paths per sequence
    /// (averaged). `x` is `[T, B, K*d]` normalized, `g` is `[T, B, K*C]`.
    /// For rnn-gauss the result is the exact log-likelihood.
    pub fn sequence_elbo<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        g: Option<&Tensor>,
        rng: &mut R,
        samples: usize,
    ) -> Result<ElboTerms, ModelError> {
        let (terms, _) = self.run_sequence(x, g, rng, samples, false)?;
        Ok(terms)
    }

    /// Per-path log importance weights `log p(x, z) - log q(z | x)`,
    /// shaped `[B, samples]`.
    pub fn log_weights<R: Rng + ?Sized>(&self, x: &Tensor, g: Option<&Tensor>, rng: &mut R, samples: usize) -> Result<Tensor, ModelError> {
        let (_, w) = self.run_sequence(x, g, rng, samples, true)?;
        Ok(w.expect("requested"))
    }

    fn run_sequence<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        g: Option<&Tensor>,
        rng: &mut R,
        samples: usize,
        weights: bool,
    ) -> Result<(ElboTerms, Option<Tensor>), ModelError> {
        if samples == 0 {
            return Err(ModelError::Input("sample count must be at least 1".into()));
        }
        let (t_len, batch, width) = x.dims3()?;
        if width != self.agents * self.dim {
            return Err(ModelError::Input(format!("state width {width}, expected {}", self.agents * self.dim)));
        }
        let repeat = |t: &Tensor| -> CResult<Tensor> {
            if samples == 1 {
                return Ok(t.clone());
            }
            let (a, b, c) = t.dims3()?;
            t.unsqueeze(2)?.broadcast_as((a, b, samples, c))?.contiguous()?.reshape((a, b * samples, c))
        };
        let x = repeat(x)?;
        let g = g.map(repeat).transpose()?;
        if let Some(g) = &g {
            if g.dim(0)? != t_len {
                return Err(ModelError::Input("macro-intents and states differ in length".into()));
            }
        }
        let n = batch * samples;
        let mut st = self.zero_state(n)?;
        let mut recon_steps = Vec::with_capacity(t_len);
        let mut kl_steps = Vec::with_capacity(t_len);
        let mut weight_steps = Vec::new();
        for t in 0..t_len {
            let xt = x.get(t)?;
            let gt = g.as_ref().map(|g| g.get(t)).transpose()?;
            let z = match (self.prior(&st)?, self.encode(&xt, &st)?) {
                (Some(p), Some(q)) => {
                    let z = reparam_sample(&q, &normal_noise(rng, &self.latent_shape(n), self.dtype)?)?;
                    kl_steps.push(kl_diag_gaussian(&q, &p)?.sum(0)?);
                    if weights {
                        weight_steps.push((gaussian_log_density(&z, &p)? - gaussian_log_density(&z, &q)?)?.sum(0)?);
                    }
                    Some(z)
                }
                _ => None,
            };
            let out = self.decode(z.as_ref(), &st, gt.as_ref())?;
            recon_steps.push(gaussian_log_density(&self.head_view(&xt)?, &out)?.sum(0)?);
            st = self.recurrence(&xt, z.as_ref(), &st)?;
        }
        let recon = Tensor::stack(&recon_steps, 0)?;
        check_finite(&recon, "reconstruction log-density")?;
        let kl = if kl_steps.is_empty() { recon.zeros_like()? } else { Tensor::stack(&kl_steps, 0)? };
        check_finite(&kl, "KL divergence")?;
        let recon_sum = recon.sum(0)?;
        let kl_sum = kl.sum(0)?;
        let log_w = if weights {
            let extra = if weight_steps.is_empty() { recon_sum.zeros_like()? } else { Tensor::stack(&weight_steps, 0)?.sum(0)? };
            Some((&recon_sum + extra)?.reshape((batch, samples))?)
        } else {
            None
        };
        let mean = |t: Tensor| -> CResult<Tensor> { t.reshape((batch, samples))?.mean(1) };
        let reconstruction = mean(recon_sum)?;
        let kl = mean(kl_sum)?;
        let elbo = (&reconstruction - &kl)?;
        Ok((ElboTerms { elbo, reconstruction, kl }, log_w))
    }
}

/// Fails with the first timestep whose value in `steps` (`[T, ...]`) is not
/// finite.
pub(crate) fn check_finite(steps: &Tensor, what: &'static str) -> Result<(), ModelError> {
    let t_len = steps.dim(0)?;
    let flat = steps.reshape((t_len, ()))?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    if let Some(step) = flat.iter().position(|row| row.iter().any(|v| !v.is_finite())) {
        return Err(ModelError::NonFinite { step, quantity: what });
    }
    Ok(())
}
