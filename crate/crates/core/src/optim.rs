//! Parameter storage, Adam with decoupled weight decay, and the cosine
//! learning-rate schedule.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One named parameter with its gradient slot and Adam moments.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
    pub trainable: bool,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let n = value.numel();
        Param { value, grad: None, m: vec![0.0; n], v: vec![0.0; n], step: 0, trainable: true }
    }
}

/// Hierarchically named parameters (`encoder.stage1.down.weight`, ...) kept
/// in sorted order so iteration and serialization are deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), Param::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, p)| p.value.numel()).sum()
    }

    /// SHA-256 over names, shapes and value bytes of the selected parameters.
    pub fn checksum(&self, mut select: impl FnMut(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.entries.iter().filter(|(k, _)| select(k)) {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(p.value.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{name}`")))?;
        p.value.ensure_same_shape(&grad, name)?;
        p.grad = Some(grad);
        Ok(())
    }
}

/// Weight decay applies to `*.weight` tensors only; biases and
/// normalization affines are exempt.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { base_lr: 1e-3, total_steps: 1, weight_decay: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be finite and non-negative, got {}", self.base_lr)));
        }
        if self.total_steps == 0 {
            return Err(Error::invalid("total_steps must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::invalid("Adam betas must lie in (0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("Adam eps must be positive"));
        }
        Ok(())
    }
}

/// `base_lr · ½(1 + cos(π·step/total))`; steps past the end clamp to 0.
pub fn cosine_lr(step: u64, cfg: &OptimizerConfig) -> f64 {
    if step >= cfg.total_steps {
        return 0.0;
    }
    let t = step as f64 / cfg.total_steps as f64;
    cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One Adam update (bias-corrected, decoupled weight decay) over every
/// trainable parameter. Frozen parameters are not touched at all.
pub fn adam_step(params: &mut ParamSet, lr: f64, cfg: &OptimizerConfig) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
        return Err(Error::Contract(format!("no gradient for trainable parameter `{name}`")));
    }
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let eps = cfg.eps as f32;
    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        p.step += 1;
        let t = p.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let wd = if decays(name) { (lr * cfg.weight_decay) as f32 } else { 0.0 };
        let grad = p.grad.as_ref().expect("checked above");
        let Param { value, m, v, .. } = p;
        for (((x, g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let denom = v.sqrt() / bc2_sqrt + eps;
            *x -= step_size * *m / denom + wd * *x;
        }
    }
    Ok(())
}
