//! Elementwise activations with hand-written backward passes.
//!
//! Candle's CPU `tanh` goes through a slow scalar path; these evaluate via
//! `exp_m1`, which is several times faster and exact enough for training.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, DType, Error, Layout, Result, Shape, Tensor, D};

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout, op: &str) -> Result<&'a [T]> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| Error::Msg(format!("{op} expects a contiguous input")))?;
    Ok(&v[start..end])
}

fn tanh_f64(x: f64) -> f64 {
    let e = (2.0 * x.clamp(-40.0, 40.0)).exp_m1();
    e / (e + 2.0)
}

fn tanh_f32(x: f32) -> f32 {
    let e = (2.0 * x.clamp(-20.0, 20.0)).exp_m1();
    e / (e + 2.0)
}

struct Tanh;

impl CustomOp1 for Tanh {
    fn name(&self) -> &'static str {
        "tanh-expm1"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(contiguous_slice(v, layout, self.name())?.iter().map(|&x| tanh_f32(x)).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(contiguous_slice(v, layout, self.name())?.iter().map(|&x| tanh_f64(x)).collect()),
            other => return Err(Error::UnsupportedDTypeForOp(other.dtype(), self.name())),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.mul(&res.sqr()?.affine(-1.0, 1.0)?)?))
    }
}

struct Sigmoid;

impl CustomOp1 for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => {
                CpuStorage::F32(contiguous_slice(v, layout, self.name())?.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect())
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(contiguous_slice(v, layout, self.name())?.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect())
            }
            other => return Err(Error::UnsupportedDTypeForOp(other.dtype(), self.name())),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad_res.mul(&res.mul(&res.affine(-1.0, 1.0)?)?)?))
    }
}

pub fn tanh(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Tanh)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Sigmoid)
}

/// Log-softmax over the last dimension.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    shifted.broadcast_sub(&lse)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    log_softmax(x)?.exp()
}

/// Builds a tensor of `dtype` from `f64` values.
pub fn tensor_from_f64(values: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Tensor::from_vec(values, shape, &candle_core::Device::Cpu)?.to_dtype(dtype)
}

/// Flattens any float tensor into `f64` values.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn activations_match_std() {
        let xs: Vec<f64> = (-400..=400).map(|i| i as f64 * 0.05).chain([1e-9, -1e-7, 60.0, -60.0]).collect();
        let t = Tensor::new(xs.as_slice(), &Device::Cpu).unwrap();
        let th = to_f64_vec(&tanh(&t).unwrap()).unwrap();
        let sg = to_f64_vec(&sigmoid(&t).unwrap()).unwrap();
        for ((x, a), b) in xs.iter().zip(th).zip(sg) {
            assert!((a - x.tanh()).abs() <= 1e-15 + 1e-14 * x.tanh().abs(), "tanh({x})");
            assert!((b - 1.0 / (1.0 + (-x).exp())).abs() < 1e-15, "sigmoid({x})");
        }
        let t32 = t.to_dtype(DType::F32).unwrap();
        let th32 = tanh(&t32).unwrap().to_vec1::<f32>().unwrap();
        for (x, a) in xs.iter().zip(th32) {
            assert!((a as f64 - x.tanh()).abs() < 1e-6, "tanh32({x})");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = Var::new(&[-1.3f64, 0.2, 0.7, 2.5], &Device::Cpu).unwrap();
        for f in [tanh as fn(&Tensor) -> Result<Tensor>, sigmoid] {
            let y = f(x.as_tensor()).unwrap().sum_all().unwrap();
            let g = y.backward().unwrap();
            let grad = g.get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
            for (i, &xi) in [-1.3f64, 0.2, 0.7, 2.5].iter().enumerate() {
                let h = 1e-6;
                let eval = |v: f64| to_f64_vec(&f(&Tensor::new(&[v], &Device::Cpu).unwrap()).unwrap()).unwrap()[0];
                let fd = (eval(xi + h) - eval(xi - h)) / (2.0 * h);
                assert!((fd - grad[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1000.0f64, 0.0, -3.0], [0.1, 0.2, 0.3]], &Device::Cpu).unwrap();
        let p = softmax(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
