//! AdamW with decoupled weight decay, global-norm clipping and a
//! warmup-then-cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.1,
            clip_norm: Some(1.0),
        }
    }
}

/// Gains, biases, the class token and temperatures are not decayed.
pub fn decays(name: &str) -> bool {
    !(name.contains(".ln") || name.ends_with(".b") || name.contains("class_embed") || name.starts_with("logit_scale"))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub t: u64,
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
}

/// √Σ‖g‖² over every tensor.
pub fn global_norm(grads: &BTreeMap<String, Array2<f64>>) -> f64 {
    grads.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    /// One update of every tensor (across `sets`) that has an entry in
    /// `grads`. Names must be unique across sets. Returns the pre-clipping
    /// gradient norm.
    pub fn step(&mut self, sets: &mut [&mut ParamSet], grads: &BTreeMap<String, Array2<f64>>, lr: f64) -> Result<f64> {
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, g) in grads {
            let Some(p) = sets.iter_mut().find_map(|s| s.get_mut(name)) else {
                return Err(Error::invalid(format!("gradient for unknown parameter {name}")));
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| Array2::zeros(g.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array2::zeros(g.raw_dim()));
            let wd = if decays(name) { weight_decay } else { 0.0 };
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * scale;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p *= 1.0 - lr * wd;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
        Ok(norm)
    }
}

/// Linear warmup from 0 to `lr` over `warmup` steps, then cosine decay to
/// 0 at `total`.
pub fn lr_at(step: u64, lr: f64, warmup: u64, total: u64) -> Result<f64> {
    if total < warmup {
        return Err(Error::invalid(format!("total steps {total} < warmup steps {warmup}")));
    }
    if step < warmup {
        return Ok(lr * step as f64 / warmup as f64);
    }
    if step >= total {
        return Ok(0.0);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(0.5 * lr * (1.0 + (PI * progress).cos()))
}
