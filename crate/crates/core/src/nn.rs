//! Parameter storage and the handful of differentiable building blocks the
//! models need, composed from primitive tensor ops so that every one of them
//! backpropagates in both `f32` and `f64`.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels;

/// Named, read-only parameter tensors. Cloning is cheap (tensors are shared).
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.elem_count()).sum()
    }

    /// Entries whose name starts with one of `prefixes`, as fresh copies.
    pub fn subset_copy(&self, prefixes: &[&str]) -> Result<Params> {
        let mut out = Params::new();
        for (name, t) in &self.entries {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                out.insert(name.clone(), t.copy()?.detach());
            }
        }
        Ok(out)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Params> {
        let mut out = Params::new();
        for (name, t) in &self.entries {
            out.insert(name.clone(), t.to_dtype(dtype)?.detach());
        }
        Ok(out)
    }

    /// Flattened values of one entry as `f64`.
    pub fn values_f64(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }
}

/// Trainable parameters: each entry is a [`Var`] so that backward passes
/// produce gradients for it.
#[derive(Debug, Clone, Default)]
pub struct Trainable {
    vars: BTreeMap<String, Var>,
}

impl Trainable {
    pub fn from_params(p: &Params) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in p.iter() {
            vars.insert(name.clone(), Var::from_tensor(&t.copy()?)?);
        }
        Ok(Self { vars })
    }

    /// A [`Params`] view sharing storage with the variables.
    pub fn params(&self) -> Params {
        let mut p = Params::new();
        for (name, v) in &self.vars {
            p.insert(name.clone(), v.as_tensor().clone());
        }
        p
    }

    /// Detached copies of the current values.
    pub fn snapshot(&self) -> Result<Params> {
        let mut p = Params::new();
        for (name, v) in &self.vars {
            p.insert(name.clone(), v.as_tensor().copy()?.detach());
        }
        Ok(p)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites values from `p` for every name present in both.
    pub fn load_matching(&self, p: &Params) -> Result<usize> {
        let mut n = 0;
        for (name, var) in &self.vars {
            if let Ok(src) = p.get(name) {
                if src.dims() != var.dims() {
                    return Err(Error::Shape(format!(
                        "parameter {name}: stored {:?} vs model {:?}",
                        src.dims(),
                        var.dims()
                    )));
                }
                var.set(&src.to_dtype(var.dtype())?)?;
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Deterministic parameter initialization from a seeded stream.
pub struct ParamBuilder {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    params: Params,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
            params: Params::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn tensor_from_f64(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Normal(0, std) truncated to two standard deviations.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let values = (0..n)
            .map(|_| loop {
                let x: f64 = normal.sample(&mut self.rng);
                if x.abs() <= 2.0 {
                    break x * std;
                }
            })
            .collect();
        let t = self.tensor_from_f64(values, shape)?;
        self.params.insert(name, t);
        Ok(())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        let n: usize = shape.iter().product();
        let t = self.tensor_from_f64(vec![value; n], shape)?;
        self.params.insert(name, t);
        Ok(())
    }

    /// Weight `(fan_in, fan_out)` and bias `(fan_out)` of an affine map.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<()> {
        self.trunc_normal(&format!("{prefix}.w"), &[fan_in, fan_out], 0.02)?;
        if bias {
            self.constant(&format!("{prefix}.b"), &[fan_out], 0.0)?;
        }
        Ok(())
    }

    pub fn layer_norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.constant(&format!("{prefix}.g"), &[dim], 1.0)?;
        self.constant(&format!("{prefix}.b"), &[dim], 0.0)
    }

    pub fn finish(self) -> Params {
        self.params
    }
}

/// `x @ w + b` over the last axis of `x`, any number of leading axes.
pub fn linear(x: &Tensor, p: &Params, prefix: &str) -> Result<Tensor> {
    let w = p.get(&format!("{prefix}.w"))?;
    let dims = x.dims().to_vec();
    let fan_in = *dims.last().expect("non-scalar input");
    let rows = x.elem_count() / fan_in;
    let mut y = x.reshape((rows, fan_in))?.matmul(w)?;
    let bias_name = format!("{prefix}.b");
    if p.contains(&bias_name) {
        y = y.broadcast_add(p.get(&bias_name)?)?;
    }
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = w.dim(1)?;
    Ok(y.reshape(out_dims)?)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn layer_norm(x: &Tensor, p: &Params, prefix: &str) -> Result<Tensor> {
    let g = p.get(&format!("{prefix}.g"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    Ok(kernels::layer_norm(x, g, b, LAYER_NORM_EPS)?)
}

/// Exact GELU, `x Φ(x)`.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(kernels::gelu(x)?)
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(kernels::softmax_last(x)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(kernels::log_softmax_last(x)?)
}

/// Reorders axis 1 of `x` so that `out[:, i] = x[:, index[i]]`.
pub fn gather_tokens(x: &Tensor, index: &Tensor) -> Result<Tensor> {
    Ok(x.index_select(index, 1)?)
}

pub fn index_tensor(index: &[usize]) -> Result<Tensor> {
    let v: Vec<u32> = index.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v, index.len(), &Device::Cpu)?)
}

/// Inverse of a permutation.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Scalar value of a 0-d or single-element tensor as `f64`.
pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}
