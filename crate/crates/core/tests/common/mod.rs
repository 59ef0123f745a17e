//! Shared fixtures: tiny f64 models and a scalar re-implementation of the
//! network layers used as an oracle.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use mstraj_core::dataset::{Domain, NormStats};
use mstraj_core::labeling::MacroIntentSequence;
use mstraj_core::models::{Model, ModelConfig, Variant};
use rand::Rng;

pub const K: usize = 3;
pub const D: usize = 2;
pub const C: usize = 4;

pub fn tiny_config(variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::new(variant, Domain::Boids);
    c.agents = K;
    c.dim = D;
    c.latent_dim = if variant == Variant::RnnGauss { 0 } else { 3 };
    c.rnn_width = 4;
    c.mlp_width = 4;
    c.macro_width = 4;
    if variant == Variant::Hierarchical {
        c.macro_categories = C;
    }
    c
}

pub fn tiny_model(variant: Variant, seed: u64) -> Model {
    Model::build(&tiny_config(variant), NormStats::identity(D), seed, DType::F64).unwrap()
}

pub fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn random_labels(rng: &mut impl Rng, t_len: usize, batch: usize, agents: usize, categories: usize) -> Vec<MacroIntentSequence> {
    (0..batch)
        .map(|_| {
            let labels = (0..t_len * agents).map(|_| rng.gen_range(0..categories) as u16).collect();
            MacroIntentSequence::new(t_len, agents, categories, labels).unwrap()
        })
        .collect()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn param(model: &Model, name: &str) -> (Vec<usize>, Vec<f64>) {
    let v = model.params().get(name).unwrap_or_else(|| panic!("no parameter {name}"));
    (v.dims().to_vec(), flat(v.as_tensor()))
}

pub fn set_param(model: &Model, name: &str, values: Vec<f64>) {
    let v = model.params().get(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let t = Tensor::from_vec(values, v.dims(), &Device::Cpu).unwrap().to_dtype(v.dtype()).unwrap();
    v.set(&t).unwrap();
}

pub fn fill_param(model: &Model, name: &str, value: f64) {
    let n = param(model, name).1.len();
    set_param(model, name, vec![value; n]);
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}

/// Scalar evaluation of the model's layers straight from the parameter
/// values.
pub struct Oracle<'a> {
    pub model: &'a Model,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Oracle<'_> {
    pub fn linear(&self, name: &str, g: usize, x: &[f64]) -> Vec<f64> {
        self.linear_raw(&format!("{name}.weight"), &format!("{name}.bias"), g, x)
    }

    /// Three affine layers with ReLU after the first two.
    pub fn mlp(&self, name: &str, g: usize, x: &[f64]) -> Vec<f64> {
        let relu = |v: Vec<f64>| v.into_iter().map(|a| a.max(0.0)).collect::<Vec<_>>();
        let h = relu(self.linear(&format!("{name}.0"), g, x));
        let h = relu(self.linear(&format!("{name}.1"), g, &h));
        self.linear(&format!("{name}.2"), g, &h)
    }

    /// One step of a stacked GRU; `h` holds one state per layer.
    pub fn gru(&self, name: &str, g: usize, x: &[f64], h: &mut [Vec<f64>]) {
        let mut input = x.to_vec();
        for (l, hl) in h.iter_mut().enumerate() {
            let w = hl.len();
            let gi = self.linear_raw(&format!("{name}.l{l}.w_ih"), &format!("{name}.l{l}.b_ih"), g, &input);
            let gh = self.linear_raw(&format!("{name}.l{l}.w_hh"), &format!("{name}.l{l}.b_hh"), g, hl);
            let next: Vec<f64> = (0..w)
                .map(|j| {
                    let r = sigmoid(gi[j] + gh[j]);
                    let u = sigmoid(gi[w + j] + gh[w + j]);
                    let n = (gi[2 * w + j] + r * gh[2 * w + j]).tanh();
                    (1.0 - u) * n + u * hl[j]
                })
                .collect();
            *hl = next.clone();
            input = next;
        }
    }

    fn linear_raw(&self, wname: &str, bname: &str, g: usize, x: &[f64]) -> Vec<f64> {
        let (shape, w) = param(self.model, wname);
        let (_, b) = param(self.model, bname);
        let (n_in, n_out) = (shape[1], shape[2]);
        assert_eq!(x.len(), n_in, "{wname} input width");
        (0..n_out)
            .map(|o| b[g * n_out + o] + (0..n_in).map(|i| x[i] * w[(g * n_in + i) * n_out + o]).sum::<f64>())
            .collect()
    }
}

/// Splits a Gaussian head output into mean and clamped log-variance.
pub fn split_head(out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = out.len() / 2;
    (out[..n].to_vec(), out[n..].iter().map(|v| v.clamp(-10.0, 10.0)).collect())
}

pub fn log_normal(x: f64, mean: f64, log_var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI).ln() + log_var + (x - mean).powi(2) / log_var.exp())
}

pub fn one_hot_rows(labels: &[u16], categories: usize) -> Vec<f64> {
    let mut v = vec![0.0; labels.len() * categories];
    for (i, &l) in labels.iter().enumerate() {
        v[i * categories + l as usize] = 1.0;
    }
    v
}
