//! AdamW with decoupled weight decay, and the learning-rate schedules used by
//! both training stages.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment buffers for every parameter that has been updated at least once.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            ..Self::default()
        }
    }

    /// One update. Frozen parameters are never touched, even if a gradient is given.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &HashMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        let mut names: Vec<&String> = grads.keys().collect();
        names.sort();
        for name in names {
            if store.is_frozen(name) {
                continue;
            }
            let g = &grads[name];
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("gradient of {name}"),
                });
            }
            let p = store.get_mut(name)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let (b1, b2, eps, wd) = (
                self.cfg.beta1,
                self.cfg.beta2,
                self.cfg.eps,
                self.cfg.weight_decay,
            );
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * (mhat / (vhat.sqrt() + eps) + wd * *pi);
            }
        }
        Ok(())
    }

    /// Stores the moments into `out` under `optim.m.` / `optim.v.`.
    pub fn export(&self, out: &mut ParamStore) {
        for (k, t) in &self.m {
            out.insert(format!("optim.m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("optim.v.{k}"), t.clone());
        }
    }

    pub fn import(cfg: AdamWConfig, step: u64, src: &ParamStore) -> Self {
        let mut opt = Self::new(cfg);
        opt.step = step;
        for (k, t) in src.iter() {
            if let Some(name) = k.strip_prefix("optim.m.") {
                opt.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("optim.v.") {
                opt.v.insert(name.to_string(), t.clone());
            }
        }
        opt
    }
}

/// Linear warmup from `start` to `peak`, then cosine decay from `peak` to `end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupCosine {
    pub start: f64,
    pub peak: f64,
    pub end: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl WarmupCosine {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let f = step as f64 / self.warmup_steps as f64;
            return self.start + (self.peak - self.start) * f;
        }
        let decay = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let f = ((step - self.warmup_steps) as f64 / decay as f64).min(1.0);
        self.end + 0.5 * (self.peak - self.end) * (1.0 + (std::f64::consts::PI * f).cos())
    }
}

/// `base · (1 - step/total)^power`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Poly {
    pub base: f64,
    pub power: f64,
    pub total_steps: usize,
    pub min_lr: f64,
}

impl Poly {
    pub fn lr(&self, step: usize) -> f64 {
        let f = 1.0 - (step as f64 / self.total_steps.max(1) as f64).min(1.0);
        (self.base * f.powf(self.power)).max(self.min_lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_cosine_endpoints() {
        let s = WarmupCosine {
            start: 1e-6,
            peak: 1e-4,
            end: 1e-5,
            warmup_steps: 5000,
            total_steps: 20000,
        };
        assert_eq!(s.lr(0), 1e-6);
        assert!((s.lr(5000) - 1e-4).abs() < 1e-18);
        assert!((s.lr(2500) - (1e-6 + 1e-4) / 2.0).abs() < 1e-18);
        assert!((s.lr(20000) - 1e-5).abs() < 1e-18);
        assert!((s.lr(30000) - 1e-5).abs() < 1e-18);
        let mid = s.lr(12500);
        assert!((mid - 5.5e-5).abs() < 1e-15);
    }

    #[test]
    fn poly_decays_to_floor() {
        let p = Poly {
            base: 1e-4,
            power: 0.9,
            total_steps: 100,
            min_lr: 0.0,
        };
        assert_eq!(p.lr(0), 1e-4);
        assert!(p.lr(50) < 1e-4 && p.lr(50) > 5e-5);
        assert_eq!(p.lr(100), 0.0);
    }

    #[test]
    fn adamw_respects_freezing_and_decays() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::row_vector(vec![1.0, -2.0]));
        store.insert("b", Tensor::row_vector(vec![3.0]));
        store.freeze_prefix("b");
        let mut grads = HashMap::new();
        grads.insert("a".to_string(), Tensor::row_vector(vec![0.5, 0.0]));
        grads.insert("b".to_string(), Tensor::row_vector(vec![1.0]));
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        });
        opt.update(&mut store, &grads, 0.01).unwrap();
        let a = store.get("a").unwrap().data().to_vec();
        // first step: m̂/√v̂ = sign(g)
        assert!((a[0] - (1.0 - 0.01 * (1.0 + 0.1))).abs() < 1e-9);
        assert!((a[1] - (-2.0 - 0.01 * (0.1 * -2.0))).abs() < 1e-12);
        assert_eq!(store.get("b").unwrap().data(), &[3.0]);
    }
}
