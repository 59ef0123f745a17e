use crate::dataset::Trajectory;
use crate::labeling::MacroIntentSequence;
use candle_core::{DType, Device, Result, Tensor};

/// Stacks equally shaped trajectories into `[T, B, K*d]`.
pub fn states_tensor(trajs: &[&Trajectory], dtype: DType) -> Result<Tensor> {
    let first = trajs.first().ok_or_else(|| candle_core::Error::Msg("empty batch".into()))?;
    let (t_len, k, d) = first.shape();
    let w = k * d;
    let b = trajs.len();
    let mut v = vec![0.0f64; t_len * b * w];
    for (i, tr) in trajs.iter().enumerate() {
        if tr.shape() != (t_len, k, d) {
            candle_core::bail!("batch mixes trajectory shapes");
        }
        for t in 0..t_len {
            v[(t * b + i) * w..(t * b + i + 1) * w].copy_from_slice(tr.frame(t));
        }
    }
    Tensor::from_vec(v, (t_len, b, w), &Device::Cpu)?.to_dtype(dtype)
}

/// Stacked one-hot macro-intents `[T, B, K*C]` and indices `[T, B, K]`
/// (`u32`).
pub fn labels_tensor(seqs: &[&MacroIntentSequence], dtype: DType) -> Result<(Tensor, Tensor)> {
    let first = seqs.first().ok_or_else(|| candle_core::Error::Msg("empty batch".into()))?;
    let (t_len, k, c) = (first.len(), first.agents(), first.categories());
    let b = seqs.len();
    let mut onehot = vec![0.0f64; t_len * b * k * c];
    let mut idx = vec![0u32; t_len * b * k];
    for (i, s) in seqs.iter().enumerate() {
        if (s.len(), s.agents(), s.categories()) != (t_len, k, c) {
            candle_core::bail!("batch mixes label shapes");
        }
        for t in 0..t_len {
            for a in 0..k {
                let l = s.get(t, a) as usize;
                onehot[((t * b + i) * k + a) * c + l] = 1.0;
                idx[(t * b + i) * k + a] = l as u32;
            }
        }
    }
    Ok((
        Tensor::from_vec(onehot, (t_len, b, k * c), &Device::Cpu)?.to_dtype(dtype)?,
        Tensor::from_vec(idx, (t_len, b, k), &Device::Cpu)?,
    ))
}
