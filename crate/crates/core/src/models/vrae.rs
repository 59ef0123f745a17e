//! Trajectory-level latent baseline trained with a mutual-information bonus.
//!
//! A recurrent encoder summarizes the whole trajectory into one latent `z`
//! (8-way categorical with a uniform prior, or a standard Gaussian). Per-agent
//! recurrent decoders model `p(x_t^k | x_{<t}, z)`. A discriminator with the
//! encoder's architecture scores trajectories decoded from prior samples:
//!
//! ```text
//! L1 = E_q[sum_t log p(x_t | x_<t, z)] - KL(q(z | x) || p(z))
//! L2 = H(z) + E_{z ~ p(z), x' ~ p(x | z)} E_{z' ~ q(z | x')}[log q_psi(z' | x')]
//! ```
//!
//! For the categorical latent the inner expectation is the exact sum over
//! categories; for the Gaussian latent it uses one reparameterized draw.

use super::agent::{check_finite, normal_noise};
use super::gaussian::{gaussian_entropy, gaussian_log_density, gumbel_from_uniform, gumbel_softmax, kl_diag_gaussian, reparam_sample, GaussianParams};
use super::{ModelConfig, ModelError, VraeLatent};
use crate::nn::{ops, Gru, Mlp, ParamBuilder};
use candle_core::{DType, Device, Result as CResult, Tensor, D};
use rand::Rng;

#[derive(Clone)]
pub struct VraeMi {
    agents: usize,
    dim: usize,
    kind: VraeLatent,
    zdim: usize,
    tau: f64,
    enc_rnn: Gru,
    enc_head: Mlp,
    disc_rnn: Gru,
    disc_head: Mlp,
    dec_rnn: Gru,
    dec: Mlp,
    dtype: DType,
}

/// Posterior over the trajectory latent, batch-major.
#[derive(Clone, Debug)]
pub enum LatentPosterior {
    /// `[B, C]` log-probabilities.
    Categorical(Tensor),
    /// `[B, Z]` Gaussian parameters.
    Gaussian(GaussianParams),
}

/// Per-sequence objective terms, each `[B]`.
#[derive(Clone, Debug)]
pub struct VraeTerms {
    pub elbo: Tensor,
    pub mi_bound: Tensor,
    pub reconstruction: Tensor,
    pub kl: Tensor,
}

#[derive(Clone, Debug)]
pub struct DecoderState {
    pub h: Vec<Tensor>,
}

impl VraeMi {
    pub(crate) fn new(config: &ModelConfig, pb: &mut ParamBuilder) -> CResult<Self> {
        let (k, d, w) = (config.agents, config.dim, config.rnn_width);
        let zdim = config.latent_dim;
        let hidden = [config.mlp_width, config.mlp_width];
        let head_out = match config.vrae_latent {
            VraeLatent::Categorical => zdim,
            VraeLatent::Gaussian => 2 * zdim,
        };
        let enc_rnn = Gru::new(pb, "vrae.enc.rnn", 1, k * d, w, config.rnn_layers)?;
        let enc_head = Mlp::new(pb, "vrae.enc.head", 1, w, &hidden, head_out)?;
        let disc_rnn = Gru::new(pb, "vrae.disc.rnn", 1, k * d, w, config.rnn_layers)?;
        let disc_head = Mlp::new(pb, "vrae.disc.head", 1, w, &hidden, head_out)?;
        let dec_rnn = Gru::new(pb, "vrae.dec.rnn", k, k * d, w, config.rnn_layers)?;
        let dec = Mlp::new(pb, "vrae.dec.head", k, w + zdim, &hidden, 2 * d)?;
        Ok(Self {
            agents: k,
            dim: d,
            kind: config.vrae_latent,
            zdim,
            tau: config.gumbel_tau,
            enc_rnn,
            enc_head,
            disc_rnn,
            disc_head,
            dec_rnn,
            dec,
            dtype: pb.dtype(),
        })
    }

    pub(crate) fn set_tau(&mut self, tau: f64) {
        self.tau = tau;
    }

    pub fn latent_kind(&self) -> VraeLatent {
        self.kind
    }

    pub fn latent_dim(&self) -> usize {
        self.zdim
    }

    /// Entropy of the prior: `ln C` for the uniform categorical, the
    /// standard Gaussian entropy otherwise.
    pub fn prior_entropy(&self) -> f64 {
        match self.kind {
            VraeLatent::Categorical => (self.zdim as f64).ln(),
            VraeLatent::Gaussian => 0.5 * self.zdim as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln()),
        }
    }

    fn summarize(&self, rnn: &Gru, head: &Mlp, x: &Tensor) -> CResult<LatentPosterior> {
        let (t_len, b, _) = x.dims3()?;
        let mut h = rnn.zero_state(b, self.dtype)?;
        for t in 0..t_len {
            h = rnn.step(&x.get(t)?.unsqueeze(0)?, &h)?;
        }
        let out = head.forward(h.last().expect("at least one layer"))?.squeeze(0)?;
        Ok(match self.kind {
            VraeLatent::Categorical => LatentPosterior::Categorical(ops::log_softmax(&out)?),
            VraeLatent::Gaussian => LatentPosterior::Gaussian(GaussianParams::from_head(&out)?),
        })
    }

    /// `q_phi(z | x)` for `x` shaped `[T, B, K*d]`.
    pub fn encode(&self, x: &Tensor) -> CResult<LatentPosterior> {
        self.summarize(&self.enc_rnn, &self.enc_head, x)
    }

    /// `q_psi(z | x)`.
    pub fn discriminate(&self, x: &Tensor) -> CResult<LatentPosterior> {
        self.summarize(&self.disc_rnn, &self.disc_head, x)
    }

    fn sample_posterior<R: Rng + ?Sized>(&self, q: &LatentPosterior, rng: &mut R) -> CResult<Tensor> {
        match q {
            LatentPosterior::Categorical(lp) => gumbel_softmax(lp, self.tau, &gumbel_noise(rng, lp.dims(), self.dtype)?),
            LatentPosterior::Gaussian(p) => reparam_sample(p, &normal_noise(rng, p.mean.dims(), self.dtype)?),
        }
    }

    /// Relaxed (categorical) or reparameterized (Gaussian) draw from the prior.
    pub fn sample_prior_relaxed<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> CResult<Tensor> {
        match self.kind {
            VraeLatent::Categorical => {
                let logits = Tensor::zeros((batch, self.zdim), self.dtype, &Device::Cpu)?;
                gumbel_softmax(&logits, self.tau, &gumbel_noise(rng, &[batch, self.zdim], self.dtype)?)
            }
            VraeLatent::Gaussian => normal_noise(rng, &[batch, self.zdim], self.dtype),
        }
    }

    /// Exact draw from the prior: a one-hot category or a Gaussian vector.
    pub fn sample_prior<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> CResult<Tensor> {
        match self.kind {
            VraeLatent::Categorical => {
                let mut v = vec![0.0f64; batch * self.zdim];
                for b in 0..batch {
                    v[b * self.zdim + rng.gen_range(0..self.zdim)] = 1.0;
                }
                Tensor::from_vec(v, (batch, self.zdim), &Device::Cpu)?.to_dtype(self.dtype)
            }
            VraeLatent::Gaussian => normal_noise(rng, &[batch, self.zdim], self.dtype),
        }
    }

    pub fn decoder_state(&self, batch: usize) -> CResult<DecoderState> {
        Ok(DecoderState { h: self.dec_rnn.zero_state(batch, self.dtype)? })
    }

    /// Per-agent output distribution `[K, B, d]` given `z` (`[B, Z]`).
    pub fn decode_step(&self, st: &DecoderState, z: &Tensor) -> CResult<GaussianParams> {
        let top = st.h.last().expect("at least one layer");
        let zk = z.unsqueeze(0)?.broadcast_as((self.agents, z.dim(0)?, self.zdim))?.contiguous()?;
        GaussianParams::from_head(&self.dec.forward(&Tensor::cat(&[top, &zk], 2)?)?)
    }

    pub fn advance(&self, st: &DecoderState, x: &Tensor) -> CResult<DecoderState> {
        Ok(DecoderState { h: self.dec_rnn.step(&x.unsqueeze(0)?, &st.h)? })
    }

    pub fn agent_view(&self, x: &Tensor) -> CResult<Tensor> {
        let b = x.dim(0)?;
        x.reshape((b, self.agents, self.dim))?.transpose(0, 1)?.contiguous()
    }

    pub fn joint_view(&self, per_agent: &Tensor) -> CResult<Tensor> {
        let (_, b, _) = per_agent.dims3()?;
        per_agent.transpose(0, 1)?.contiguous()?.reshape((b, self.agents * self.dim))
    }

    /// Both objective terms for `x` shaped `[T, B, K*d]`.
    pub fn objective<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<VraeTerms, ModelError> {
        let (t_len, b, width) = x.dims3()?;
        if width != self.agents * self.dim {
            return Err(ModelError::Input(format!("state width {width}, expected {}", self.agents * self.dim)));
        }
        let q = self.encode(x)?;
        let z = self.sample_posterior(&q, rng)?;
        let kl = match &q {
            LatentPosterior::Categorical(lp) => (lp.exp()? * lp)?.sum(D::Minus1)?.affine(1.0, (self.zdim as f64).ln())?,
            LatentPosterior::Gaussian(p) => {
                let std = GaussianParams::new(p.mean.zeros_like()?, p.log_var.zeros_like()?)?;
                kl_diag_gaussian(p, &std)?
            }
        };
        let mut st = self.decoder_state(b)?;
        let mut recon = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = x.get(t)?;
            let out = self.decode_step(&st, &z)?;
            recon.push(gaussian_log_density(&self.agent_view(&xt)?, &out)?.sum(0)?);
            st = self.advance(&st, &xt)?;
        }
        let recon = Tensor::stack(&recon, 0)?;
        check_finite(&recon, "reconstruction log-density")?;
        let reconstruction = recon.sum(0)?;
        let elbo = (&reconstruction - &kl)?;

        let zp = self.sample_prior_relaxed(b, rng)?;
        let mut st = self.decoder_state(b)?;
        let mut generated = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            let out = self.decode_step(&st, &zp)?;
            let xt = self.joint_view(&reparam_sample(&out, &normal_noise(rng, out.mean.dims(), self.dtype)?)?)?;
            st = self.advance(&st, &xt)?;
            generated.push(xt);
        }
        let generated = Tensor::stack(&generated, 0)?;
        check_finite(&generated, "decoded trajectory")?;
        let cross = match (self.encode(&generated)?, self.discriminate(&generated)?) {
            (LatentPosterior::Categorical(lq), LatentPosterior::Categorical(lpsi)) => (lq.exp()? * lpsi)?.sum(D::Minus1)?,
            (LatentPosterior::Gaussian(q), LatentPosterior::Gaussian(psi)) => {
                let zq = reparam_sample(&q, &normal_noise(rng, q.mean.dims(), self.dtype)?)?;
                gaussian_log_density(&zq, &psi)?
            }
            _ => unreachable!("encoder and discriminator share the latent kind"),
        };
        let mi_bound = cross.affine(1.0, self.prior_entropy())?;
        Ok(VraeTerms { elbo, mi_bound, reconstruction, kl })
    }

    /// Entropy of a Gaussian posterior, exposed for diagnostics.
    pub fn posterior_entropy(q: &LatentPosterior) -> CResult<Tensor> {
        match q {
            LatentPosterior::Categorical(lp) => (lp.exp()? * lp)?.sum(D::Minus1)?.neg(),
            LatentPosterior::Gaussian(p) => gaussian_entropy(p),
        }
    }
}

pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], dtype: DType) -> CResult<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| gumbel_from_uniform(rng.gen::<f64>())).collect();
    Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)
}
