//! AdamW with decoupled weight decay and global-norm gradient clipping.
//! Moments live in plain maps so they can be checkpointed and restored
//! bit-exactly.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{scalar_f64, Params, Trainable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            grad_clip: 3.0,
        }
    }
}

/// Parameters exempt from weight decay: vectors (biases, norm gains), the
/// positional table and the mask token.
pub fn decays(name: &str, rank: usize) -> bool {
    rank >= 2 && !name.ends_with("pos_embed") && name != "mask_token"
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Number of updates applied so far.
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &Trainable) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in params.vars() {
            m.insert(name.clone(), var.zeros_like()?);
            v.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self { config, t: 0, m, v })
    }

    /// Names of the parameters this optimizer updates.
    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.m.keys()
    }

    /// Global L2 norm of the gradients present in `grads`.
    pub fn grad_norm(params: &Trainable, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in params.vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += scalar_f64(&g.to_dtype(DType::F64)?.sqr()?.sum_all()?)?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update at learning rate `lr`; returns the pre-clip gradient norm.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &Trainable, grads: &GradStore, lr: f64) -> Result<f64> {
        self.step_scaled(params, grads, lr, |_| 1.0)
    }

    /// [`AdamW::step`] with a per-parameter learning-rate multiplier.
    pub fn step_scaled(
        &mut self,
        params: &Trainable,
        grads: &GradStore,
        lr: f64,
        lr_scale: impl Fn(&str) -> f64,
    ) -> Result<f64> {
        let norm = Self::grad_norm(params, grads)?;
        let c = &self.config;
        let scale = if c.grad_clip > 0.0 && norm > c.grad_clip {
            c.grad_clip / (norm + 1e-6)
        } else {
            1.0
        };
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (name, var) in params.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let lr = lr * lr_scale(name);
            // detached so the moments never chain autograd history across steps
            let g = if scale != 1.0 { (g * scale)?.detach() } else { g.detach() };
            let m = ((&self.m[name] * c.beta1)? + (&g * (1.0 - c.beta1))?)?.detach();
            let v = ((&self.v[name] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?.detach();
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            let mut p = var.as_tensor().detach();
            if c.weight_decay > 0.0 && decays(name, var.rank()) {
                p = (p * (1.0 - lr * c.weight_decay))?;
            }
            var.set(&(p - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(norm)
    }

    /// Moments as named tensors (`m/<name>`, `v/<name>`) for checkpointing.
    pub fn state(&self) -> Params {
        let mut p = Params::new();
        for (name, t) in &self.m {
            p.insert(format!("m/{name}"), t.clone());
        }
        for (name, t) in &self.v {
            p.insert(format!("v/{name}"), t.clone());
        }
        p
    }

    /// Restores moments saved by [`AdamW::state`].
    pub fn load_state(&mut self, state: &Params, t: u64) -> Result<()> {
        for (name, slot) in self.m.iter_mut() {
            *slot = state.get(&format!("m/{name}"))?.clone();
        }
        for (name, slot) in self.v.iter_mut() {
            *slot = state.get(&format!("v/{name}"))?.clone();
        }
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn single(value: &[f64], shape: &[usize], name: &str) -> Trainable {
        let mut p = Params::new();
        p.insert(name, Tensor::from_vec(value.to_vec(), shape, &Device::Cpu).unwrap());
        Trainable::from_params(&p).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let tr = single(&[1.0, -2.0], &[2], "x.b");
        let x = tr.get("x.b").unwrap();
        let loss = (x.as_tensor() * Tensor::new(&[3.0, -0.5], &Device::Cpu).unwrap()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &tr).unwrap();
        opt.step(&tr, &grads, 0.1).unwrap();
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        // bias-corrected first step is lr * g / (|g| + eps): no decay on vectors
        assert!((v[0] - 0.9).abs() < 1e-8 && (v[1] + 1.9).abs() < 1e-8);
    }

    #[test]
    fn weight_decay_is_decoupled_and_selective() {
        let mut p = Params::new();
        p.insert("w.w", Tensor::new(&[[2.0f64, 2.0]], &Device::Cpu).unwrap());
        p.insert("w.b", Tensor::new(&[2.0f64, 2.0], &Device::Cpu).unwrap());
        let tr = Trainable::from_params(&p).unwrap();
        let (w, b) = (tr.get("w.w").unwrap(), tr.get("w.b").unwrap());
        let loss = (w.as_tensor().sum_all().unwrap() + b.as_tensor().sum_all().unwrap()).unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &tr).unwrap();
        opt.step(&tr, &grads, 0.1).unwrap();
        let wv = w.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let bv = b.as_tensor().to_vec1::<f64>().unwrap();
        // same gradient, so the only difference is the decoupled decay lr * wd * p
        assert!((bv[0] - wv[0] - 0.1 * 0.05 * 2.0).abs() < 1e-12);
        assert!(!decays("enc.pos_embed", 2));
        assert!(!decays("mask_token", 1));
        assert!(!decays("enc.norm.g", 1));
        assert!(decays("enc.patch_embed.w", 2));
    }

    #[test]
    fn clipping_reports_the_raw_norm() {
        let tr = single(&[0.0, 0.0], &[2], "x.b");
        let x = tr.get("x.b").unwrap();
        let loss = (x.as_tensor() * Tensor::new(&[30.0, 40.0], &Device::Cpu).unwrap()).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &tr).unwrap();
        assert!((opt.step(&tr, &grads, 0.01).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn state_round_trip() {
        let tr = single(&[1.0, 2.0], &[2], "x.b");
        let x = tr.get("x.b").unwrap();
        let grads = x.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &tr).unwrap();
        opt.step(&tr, &grads, 0.1).unwrap();
        let mut other = AdamW::new(AdamWConfig::default(), &tr).unwrap();
        other.load_state(&opt.state(), opt.t).unwrap();
        assert_eq!(other.t, 1);
        assert_eq!(
            other.state().values_f64("m/x.b").unwrap(),
            opt.state().values_f64("m/x.b").unwrap()
        );
    }
}
