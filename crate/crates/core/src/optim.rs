//! Adam with bias correction and a cosine-annealed learning rate.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use crate::tape::{Gradients, ParamId, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// First/second moment accumulators keyed by parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    moments: BTreeMap<ParamId, Moments>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, moments: BTreeMap::new(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    ///
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f32) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(alloc::format!("learning rate must be positive, got {lr}")));
        }
        for (id, g) in grads.iter() {
            if g.shape() != params.get(id).shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    detail: alloc::format!("gradient {:?} vs parameter {:?}", g.shape(), params.get(id).shape()),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite { what: "gradient", step: self.step + 1 });
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = (1.0 - libm::pow(beta1 as f64, t as f64)) as f32;
        let bc2 = (1.0 - libm::pow(beta2 as f64, t as f64)) as f32;
        for (id, g) in grads.iter() {
            let n = g.len();
            let mom = self.moments.entry(id).or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            let p = params.get_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * gi;
                mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                p[i] -= lr * m_hat / (libm::sqrtf(v_hat) + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr0` down to `floor` over `total_steps`.
#[derive(Debug, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr0: f32,
    pub total_steps: usize,
    pub floor: f32,
    #[serde(skip)]
    warned: AtomicBool,
}

impl Clone for CosineSchedule {
    fn clone(&self) -> Self {
        Self::new(self.lr0, self.total_steps, self.floor)
    }
}

impl PartialEq for CosineSchedule {
    fn eq(&self, other: &Self) -> bool {
        self.lr0 == other.lr0 && self.total_steps == other.total_steps && self.floor == other.floor
    }
}

impl CosineSchedule {
    pub fn new(lr0: f32, total_steps: usize, floor: f32) -> Self {
        Self { lr0, total_steps, floor, warned: AtomicBool::new(false) }
    }

    /// `floor + (lr0 - floor) * (1 + cos(pi * t / T)) / 2`; clamps to `floor` past `T`.
    pub fn rate(&self, t: usize) -> f32 {
        if t > self.total_steps {
            if !self.warned.swap(true, Ordering::Relaxed) {
                log::warn!("schedule step {t} past horizon {}; clamping to floor", self.total_steps);
            }
            return self.floor;
        }
        if self.total_steps == 0 {
            return self.lr0;
        }
        let phase = core::f64::consts::PI * t as f64 / self.total_steps as f64;
        let span = (self.lr0 - self.floor) as f64;
        (self.floor as f64 + 0.5 * span * (1.0 + libm::cos(phase))) as f32
    }
}
