//! Neural building blocks on top of candle tensors.
//!
//! Every layer is *grouped*: weights carry a leading group axis so that `K`
//! independent per-agent networks evaluate as one batched matmul. Inputs are
//! `[groups, batch, features]`; an input with a leading axis of 1 is
//! broadcast to all groups.

pub mod ops;
mod params;

pub use params::{random_orthogonal, ParamBuilder, Params, TensorData};

use candle_core::{Result, Tensor, Var};

fn broadcast_groups(x: &Tensor, groups: usize) -> Result<Tensor> {
    let (g, b, f) = x.dims3()?;
    if g == groups {
        Ok(x.clone())
    } else if g == 1 {
        x.broadcast_as((groups, b, f))?.contiguous()
    } else {
        candle_core::bail!("input has {g} groups, layer expects {groups}")
    }
}

/// Affine map `x W + b` per group, initialised `U(-1/sqrt(in), 1/sqrt(in))`.
#[derive(Clone)]
pub struct GroupLinear {
    pub weight: Var,
    pub bias: Var,
    groups: usize,
    in_dim: usize,
}

impl GroupLinear {
    pub fn new(pb: &mut ParamBuilder, name: &str, groups: usize, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = pb.uniform(&format!("{name}.weight"), &[groups, in_dim, out_dim], bound)?;
        let bias = pb.uniform(&format!("{name}.bias"), &[groups, 1, out_dim], bound)?;
        Ok(Self { weight, bias, groups, in_dim })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = broadcast_groups(x, self.groups)?;
        if x.dim(2)? != self.in_dim {
            candle_core::bail!("linear expects {} input features, got {}", self.in_dim, x.dim(2)?);
        }
        x.matmul(self.weight.as_tensor())?.broadcast_add(self.bias.as_tensor())
    }
}

/// Fully connected network with ReLU hidden layers and a linear output.
#[derive(Clone)]
pub struct Mlp {
    layers: Vec<GroupLinear>,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, name: &str, groups: usize, in_dim: usize, hidden: &[usize], out_dim: usize) -> Result<Self> {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| GroupLinear::new(pb, &format!("{name}.{i}"), groups, w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// One GRU layer with gate order (reset, update, candidate):
///
/// ```text
/// r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
/// u  = sigmoid(W_iu x + b_iu + W_hu h + b_hu)
/// n  = tanh(W_in x + b_in + r * (W_hn h + b_hn))
/// h' = (1 - u) * n + u * h
/// ```
#[derive(Clone)]
pub struct GruCell {
    pub input: GroupLinear,
    pub hidden: GroupLinear,
    width: usize,
}

impl GruCell {
    pub fn new(pb: &mut ParamBuilder, name: &str, groups: usize, in_dim: usize, width: usize) -> Result<Self> {
        let bound = 1.0 / (width as f64).sqrt();
        let input = GroupLinear {
            weight: pb.uniform(&format!("{name}.w_ih"), &[groups, in_dim, 3 * width], bound)?,
            bias: pb.uniform(&format!("{name}.b_ih"), &[groups, 1, 3 * width], bound)?,
            groups,
            in_dim,
        };
        let hidden = GroupLinear {
            weight: pb.orthogonal_blocks(&format!("{name}.w_hh"), groups, width, 3)?,
            bias: pb.uniform(&format!("{name}.b_hh"), &[groups, 1, 3 * width], bound)?,
            groups,
            in_dim: width,
        };
        Ok(Self { input, hidden, width })
    }

    pub fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let w = self.width;
        let gi = self.input.forward(x)?;
        let gh = self.hidden.forward(h)?;
        let r = ops::sigmoid(&(gi.narrow(2, 0, w)? + gh.narrow(2, 0, w)?)?)?;
        let u = ops::sigmoid(&(gi.narrow(2, w, w)? + gh.narrow(2, w, w)?)?)?;
        let n = ops::tanh(&(gi.narrow(2, 2 * w, w)? + (r * gh.narrow(2, 2 * w, w)?)?)?)?;
        // (1 - u) * n + u * h == n + u * (h - n)
        n.clone() + (u * (h - n)?)?
    }
}

/// Stacked GRU; the state holds one `[groups, batch, width]` tensor per
/// layer, and the last layer's state is the summary used by output heads.
#[derive(Clone)]
pub struct Gru {
    cells: Vec<GruCell>,
    groups: usize,
    width: usize,
}

impl Gru {
    pub fn new(pb: &mut ParamBuilder, name: &str, groups: usize, in_dim: usize, width: usize, layers: usize) -> Result<Self> {
        let cells = (0..layers)
            .map(|l| GruCell::new(pb, &format!("{name}.l{l}"), groups, if l == 0 { in_dim } else { width }, width))
            .collect::<Result<_>>()?;
        Ok(Self { cells, groups, width })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn zero_state(&self, batch: usize, dtype: candle_core::DType) -> Result<Vec<Tensor>> {
        self.cells
            .iter()
            .map(|_| Tensor::zeros((self.groups, batch, self.width), dtype, &candle_core::Device::Cpu))
            .collect()
    }

    pub fn step(&self, x: &Tensor, state: &[Tensor]) -> Result<Vec<Tensor>> {
        if state.len() != self.cells.len() {
            candle_core::bail!("state has {} layers, recurrence has {}", state.len(), self.cells.len());
        }
        let mut input = x.clone();
        let mut next = Vec::with_capacity(state.len());
        for (cell, h) in self.cells.iter().zip(state) {
            let h2 = cell.step(&input, h)?;
            input = h2.clone();
            next.push(h2);
        }
        Ok(next)
    }
}
