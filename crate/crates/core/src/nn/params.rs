use candle_core::{DType, Device, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;

/// Raw parameter values as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorData {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self { shape: t.dims().to_vec(), data: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()? })
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Tensor::from_vec(self.data.clone(), self.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)
    }
}

/// Named trainable variables in creation order.
#[derive(Clone, Default)]
pub struct Params {
    entries: Vec<(String, Var)>,
}

impl Params {
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Variables whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.entries.iter().filter(|(n, _)| n.starts_with(prefix)).cloned().collect()
    }

    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn export(&self) -> Result<Vec<(String, TensorData)>> {
        self.entries
            .iter()
            .map(|(n, v)| Ok((n.clone(), TensorData::from_tensor(v.as_tensor())?)))
            .collect()
    }

    /// SHA-256 over names and `f32` little-endian values of the parameters
    /// whose names start with `prefix`.
    pub fn checksum(&self, prefix: &str) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            for v in var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Creates parameters either from a seeded initializer or from stored
/// values. Shapes are always derived from the caller, so a stored tensor with
/// the wrong shape is an error.
pub struct ParamBuilder<'a> {
    dtype: DType,
    rng: ChaCha8Rng,
    source: Option<&'a HashMap<String, TensorData>>,
    params: Params,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self { dtype, rng: ChaCha8Rng::seed_from_u64(seed), source: None, params: Params::default() }
    }

    pub fn from_source(dtype: DType, source: &'a HashMap<String, TensorData>) -> Self {
        Self { dtype, rng: ChaCha8Rng::seed_from_u64(0), source: Some(source), params: Params::default() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn finish(self) -> Params {
        self.params
    }

    fn register(&mut self, name: &str, shape: &[usize], init: impl FnOnce(&mut ChaCha8Rng) -> Vec<f64>) -> Result<Var> {
        if self.params.get(name).is_some() {
            candle_core::bail!("duplicate parameter `{name}`");
        }
        let tensor = match self.source {
            Some(src) => {
                let stored = src.get(name).ok_or_else(|| candle_core::Error::Msg(format!("missing parameter `{name}`")))?;
                if stored.shape != shape {
                    candle_core::bail!("parameter `{name}` has shape {:?}, expected {:?}", stored.shape, shape);
                }
                stored.to_tensor(self.dtype)?
            }
            None => Tensor::from_vec(init(&mut self.rng), shape, &Device::Cpu)?.to_dtype(self.dtype)?,
        };
        let var = Var::from_tensor(&tensor)?;
        self.params.entries.push((name.to_string(), var.clone()));
        Ok(var)
    }

    /// `U(-bound, bound)` initialization.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let n = shape.iter().product();
        self.register(name, shape, |rng| (0..n).map(|_| rng.gen_range(-bound..=bound)).collect())
    }

    /// `[groups, size, blocks * size]` weights whose `size x size` blocks are
    /// independent random orthogonal matrices.
    pub fn orthogonal_blocks(&mut self, name: &str, groups: usize, size: usize, blocks: usize) -> Result<Var> {
        let shape = [groups, size, blocks * size];
        self.register(name, &shape, |rng| {
            let mut out = vec![0.0; groups * size * blocks * size];
            for g in 0..groups {
                for b in 0..blocks {
                    let q = random_orthogonal(size, rng);
                    for i in 0..size {
                        for j in 0..size {
                            out[(g * size + i) * blocks * size + b * size + j] = q[i * size + j];
                        }
                    }
                }
            }
            out
        })
    }
}

/// Random orthogonal matrix (row-major) via modified Gram-Schmidt on a
/// Gaussian matrix's columns.
pub fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let mut ok = true;
        for j in 0..n {
            let (done, rest) = cols.split_at_mut(j);
            let c = &mut rest[0];
            for prev in done.iter() {
                let dot: f64 = prev.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
                c.iter_mut().zip(prev).for_each(|(x, p)| *x -= dot * p);
            }
            let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-10 {
                ok = false;
                break;
            }
            c.iter_mut().for_each(|x| *x /= norm);
        }
        if ok {
            let mut m = vec![0.0; n * n];
            for (j, c) in cols.iter().enumerate() {
                for (i, v) in c.iter().enumerate() {
                    m[i * n + j] = *v;
                }
            }
            return m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_matrix_has_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 17;
        let q = random_orthogonal(n, &mut rng);
        for a in 0..n {
            for b in 0..n {
                let dot: f64 = (0..n).map(|i| q[i * n + a] * q[i * n + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn builder_is_seeded_and_checks_stored_shapes() {
        let build = |seed| {
            let mut pb = ParamBuilder::new(DType::F32, seed);
            pb.uniform("a", &[2, 3], 0.5).unwrap();
            pb.orthogonal_blocks("b", 2, 4, 3).unwrap();
            pb.finish()
        };
        let (x, y) = (build(1), build(1));
        assert_eq!(x.checksum("").unwrap(), y.checksum("").unwrap());
        assert_ne!(x.checksum("").unwrap(), build(2).checksum("").unwrap());

        let stored: HashMap<String, TensorData> = x.export().unwrap().into_iter().collect();
        let mut pb = ParamBuilder::from_source(DType::F32, &stored);
        pb.uniform("a", &[2, 3], 0.5).unwrap();
        assert!(pb.uniform("b", &[2, 4, 4], 0.5).is_err());
        let mut pb = ParamBuilder::from_source(DType::F32, &stored);
        assert!(pb.uniform("missing", &[1], 0.5).is_err());
    }
}
