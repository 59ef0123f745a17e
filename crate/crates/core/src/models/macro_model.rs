//! Recurrent macro-intent model with `K` independent categorical heads.
//!
//! Step `t` (0-indexed) emits `p(g_t | h_{g,t-1}, x_{t-1})` with
//! `x_{-1} = 0` and `h_{g,-1} = 0`, then advances
//! `h_{g,t} = GRU([g_t, x_{t-1}], h_{g,t-1})` with the observed or sampled
//! `g_t`.

use super::{ModelConfig, ModelError};
use crate::nn::{ops, Gru, Mlp, ParamBuilder};
use candle_core::{DType, Result as CResult, Tensor, D};

#[derive(Clone)]
pub struct MacroModel {
    agents: usize,
    categories: usize,
    state_width: usize,
    rnn: Gru,
    head: Mlp,
    dtype: DType,
}

#[derive(Clone, Debug)]
pub struct MacroState {
    pub h: Vec<Tensor>,
    /// `[B, K*d]` states of the previous frame.
    pub x_prev: Tensor,
}

impl MacroModel {
    pub(crate) fn new(config: &ModelConfig, pb: &mut ParamBuilder) -> CResult<Self> {
        let (k, c) = (config.agents, config.macro_categories);
        let xw = k * config.dim;
        let w = config.macro_width;
        let rnn = Gru::new(pb, "macro.rnn", 1, k * c + xw, w, config.rnn_layers)?;
        let head = Mlp::new(pb, "macro.head", 1, w + xw, &[config.mlp_width, config.mlp_width], k * c)?;
        Ok(Self { agents: k, categories: c, state_width: xw, rnn, head, dtype: pb.dtype() })
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn zero_state(&self, batch: usize) -> CResult<MacroState> {
        Ok(MacroState {
            h: self.rnn.zero_state(batch, self.dtype)?,
            x_prev: Tensor::zeros((batch, self.state_width), self.dtype, &candle_core::Device::Cpu)?,
        })
    }

    /// Log-probabilities `[B, K, C]` of the next macro-intents.
    pub fn log_probs(&self, st: &MacroState) -> CResult<Tensor> {
        let b = st.x_prev.dim(0)?;
        let top = st.h.last().expect("at least one layer");
        let input = Tensor::cat(&[top, &st.x_prev.unsqueeze(0)?], 2)?;
        let logits = self.head.forward(&input)?.squeeze(0)?.reshape((b, self.agents, self.categories))?;
        ops::log_softmax(&logits)
    }

    pub fn probs(&self, st: &MacroState) -> CResult<Tensor> {
        self.log_probs(st)?.exp()
    }

    /// Feeds the chosen `g_t` (`[B, K*C]` stacked one-hot) and the current
    /// frame `x_t` (`[B, K*d]`).
    pub fn advance(&self, st: &MacroState, g: &Tensor, x: &Tensor) -> CResult<MacroState> {
        let input = Tensor::cat(&[g, &st.x_prev], 1)?.unsqueeze(0)?;
        Ok(MacroState { h: self.rnn.step(&input, &st.h)?, x_prev: x.clone() })
    }

    /// Teacher-forced negative log-likelihood of the labels, per sequence.
    /// `x`: `[T, B, K*d]`, `g`: `[T, B, K*C]` stacked one-hot, `labels`:
    /// `[T, B, K]` category indices as `u32`.
    pub fn macro_nll(&self, x: &Tensor, g: &Tensor, labels: &Tensor) -> Result<Tensor, ModelError> {
        let (t_len, b, _) = x.dims3()?;
        if labels.dims() != [t_len, b, self.agents] || g.dims() != [t_len, b, self.agents * self.categories] {
            return Err(ModelError::Input("labels must align with the trajectory".into()));
        }
        let top = labels.flatten_all()?.max(0)?.to_scalar::<u32>()?;
        if top as usize >= self.categories {
            return Err(ModelError::Input(format!("label {top} outside 0..{}", self.categories)));
        }
        let mut st = self.zero_state(b)?;
        let mut steps = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let lp = self.log_probs(&st)?;
            let picked = lp.gather(&labels.get(t)?.unsqueeze(D::Minus1)?.contiguous()?, D::Minus1)?;
            steps.push(picked.squeeze(D::Minus1)?.sum(1)?.neg()?);
            st = self.advance(&st, &g.get(t)?, &x.get(t)?)?;
        }
        let steps = Tensor::stack(&steps, 0)?;
        super::agent::check_finite(&steps, "macro-intent log-probability")?;
        Ok(steps.sum(0)?)
    }
}
