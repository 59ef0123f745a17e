use crate::models::OptimizerSnapshot;
use crate::nn::TensorData;
use candle_core::backprop::GradStore;
use candle_core::{DType, Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update for a single tensor. `step` is the
/// 1-based count of updates including this one. Returns
/// `(param', m', v')`.
pub fn adam_update(param: &Tensor, grad: &Tensor, m: &Tensor, v: &Tensor, step: u64, cfg: &AdamConfig) -> Result<(Tensor, Tensor, Tensor)> {
    if param.dims() != grad.dims() || m.dims() != grad.dims() || v.dims() != grad.dims() {
        candle_core::bail!("adam: shape mismatch between parameter {:?} and gradient {:?}", param.dims(), grad.dims());
    }
    if step == 0 {
        candle_core::bail!("adam: step counts from 1");
    }
    let m2 = ((m * cfg.beta1)? + (grad * (1.0 - cfg.beta1))?)?;
    let v2 = ((v * cfg.beta2)? + (grad.sqr()? * (1.0 - cfg.beta2))?)?;
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    let m_hat = (&m2 / c1)?;
    let denom = (&v2 / c2)?.sqrt()?.affine(1.0, cfg.eps)?;
    let p2 = (param - (m_hat / denom)?.affine(cfg.lr, 0.0)?)?;
    Ok((p2, m2, v2))
}

/// Global L2 norm of a gradient set.
pub fn global_norm(grads: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    for g in grads {
        total += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    }
    Ok(total.sqrt())
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads)?;
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g = (&*g * scale)?;
        }
    }
    Ok(norm)
}

/// Adam state for one group of variables.
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, config: AdamConfig) -> Result<Self> {
        let m = vars.iter().map(|(_, v)| v.as_tensor().zeros_like()).collect::<Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self { config, step: 0, vars, m, v })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Gradients of this group's variables; parameters the loss does not
    /// touch get zero gradients.
    pub fn gradients(&self, grads: &GradStore) -> Result<Vec<Tensor>> {
        self.vars
            .iter()
            .map(|(_, v)| match grads.get(v.as_tensor()) {
                // gradients carry op history back into the forward graph
                Some(g) => Ok(g.detach()),
                None => v.as_tensor().zeros_like(),
            })
            .collect()
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn step(&mut self, grads: &GradStore, clip: Option<f64>) -> Result<f64> {
        let mut g = self.gradients(grads)?;
        let norm = match clip {
            Some(c) => clip_grad_norm(&mut g, c)?,
            None => global_norm(&g)?,
        };
        self.step += 1;
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let (p, m, v) = adam_update(var.as_tensor(), &g[i], &self.m[i], &self.v[i], self.step, &self.config)?;
            var.set(&p.detach())?;
            self.m[i] = m.detach();
            self.v[i] = v.detach();
        }
        Ok(norm)
    }

    pub fn snapshot(&self) -> Result<OptimizerSnapshot> {
        let export = |ts: &[Tensor]| -> Result<Vec<(String, TensorData)>> {
            self.vars.iter().zip(ts).map(|((n, _), t)| Ok((n.clone(), TensorData::from_tensor(t)?))).collect()
        };
        Ok(OptimizerSnapshot { step: self.step, first: export(&self.m)?, second: export(&self.v)? })
    }

    pub fn restore(&mut self, snap: &OptimizerSnapshot) -> Result<()> {
        if snap.first.len() != self.vars.len() || snap.second.len() != self.vars.len() {
            candle_core::bail!("optimizer snapshot covers {} tensors, expected {}", snap.first.len(), self.vars.len());
        }
        for (i, (name, var)) in self.vars.iter().enumerate() {
            let (mn, m) = &snap.first[i];
            let (vn, v) = &snap.second[i];
            if mn != name || vn != name || m.shape != var.dims() || v.shape != var.dims() {
                candle_core::bail!("optimizer snapshot does not match parameter `{name}`");
            }
            self.m[i] = m.to_tensor(var.dtype())?;
            self.v[i] = v.to_tensor(var.dtype())?;
        }
        self.step = snap.step;
        Ok(())
    }
}
