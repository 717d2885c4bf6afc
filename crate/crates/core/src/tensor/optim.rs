use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// Linear ramp from 0 to `peak` over the first `warmup_fraction` of
    /// `total_steps`, then linear decay to 0 at `total_steps`.
    WarmupLinear {
        peak: f64,
        warmup_fraction: f64,
        total_steps: usize,
    },
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::WarmupLinear {
                peak,
                warmup_fraction,
                total_steps,
            } => {
                if total_steps == 0 {
                    return 0.0;
                }
                let total = total_steps as f64;
                let step = (step as f64).min(total);
                let warmup = warmup_fraction * total;
                if step <= warmup {
                    if warmup == 0.0 {
                        peak
                    } else {
                        peak * step / warmup
                    }
                } else {
                    peak * (total - step) / (total - warmup)
                }
            }
        }
    }
}

/// Scales all gradients so that their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::norm_squared).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let f = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_in_place(f);
        }
    }
    norm
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub schedule: LrSchedule,
    step: usize,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, schedule: LrSchedule) -> Self {
        AdamW {
            config,
            schedule,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update to every parameter that has a gradient entry and
    /// returns the learning rate used.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<f64> {
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        self.step += 1;
        let lr = self.schedule.lr_at(self.step);
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("`{name}` {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *theta -= lr * weight_decay * *theta;
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(lr)
    }
}
