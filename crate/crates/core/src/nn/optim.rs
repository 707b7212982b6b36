use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{invalid, Result};

/// Linear warmup followed by cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.base_lr == 0.0 {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            clip_norm: 1.0,
        }
    }
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
    decay: bool,
}

/// AdamW with decoupled weight decay on parameters of rank 2 or more.
pub struct AdamW {
    cfg: AdamWConfig,
    slots: Vec<Slot>,
    t: i32,
}

impl AdamW {
    pub fn new(ps: &ParamStore, cfg: AdamWConfig) -> Result<Self> {
        if cfg.weight_decay < 0.0 || !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(invalid("invalid AdamW hyper-parameters"));
        }
        let slots = ps
            .iter()
            .map(|(_, var)| {
                Ok(Slot {
                    var: var.clone(),
                    m: var.zeros_like()?,
                    v: var.zeros_like()?,
                    decay: var.rank() >= 2,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, slots, t: 0 })
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update. Returns the pre-clip global gradient norm. A zero
    /// learning rate leaves parameters untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<f64> {
        let mut sq = 0.0f64;
        for s in &self.slots {
            if let Some(g) = grads.get(s.var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(crate::Error::NonFinite(0));
        }
        let scale = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        if lr == 0.0 {
            return Ok(norm);
        }
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        for s in &mut self.slots {
            let Some(g) = grads.get(s.var.as_tensor()) else { continue };
            // gradients carry the forward graph; keep only their values
            let g = (g.detach() * scale)?;
            s.m = ((&s.m * b1)? + (&g * (1.0 - b1))?)?;
            s.v = ((&s.v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let mhat = (&s.m / bc1)?;
            let vhat = (&s.v / bc2)?;
            let mut upd = (mhat / (vhat.sqrt()? + self.cfg.eps)?)?;
            if s.decay && self.cfg.weight_decay > 0.0 {
                upd = (upd + (s.var.as_tensor().detach() * self.cfg.weight_decay)?)?;
            }
            let next = (s.var.as_tensor() - (upd * lr)?)?.detach();
            s.var.set(&next)?;
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use crate::rng::seeded;
    use candle_core::DType;

    #[test]
    fn schedule_shape() {
        let s = CosineSchedule {
            base_lr: 1.0,
            min_lr: 0.0,
            warmup_steps: 2,
            total_steps: 12,
        };
        assert_eq!(s.lr(0), 0.5);
        assert_eq!(s.lr(1), 1.0);
        assert_eq!(s.lr(2), 1.0);
        assert!((s.lr(7) - 0.5).abs() < 1e-12);
        assert!(s.lr(12).abs() < 1e-12);
    }

    #[test]
    fn minimizes_quadratic_and_zero_lr_is_noop() {
        let mut ps = ParamStore::new(DType::F64);
        let x = ps.init("x", &[3], Init::Ones, &mut seeded(0)).unwrap();
        let mut opt = AdamW::new(&ps, AdamWConfig::default()).unwrap();
        let before: Vec<f64> = x.to_vec1().unwrap();
        let loss = x.sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap(), 0.0).unwrap();
        assert_eq!(x.to_vec1::<f64>().unwrap(), before);
        for _ in 0..300 {
            let loss = x.sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap(), 0.05).unwrap();
        }
        let after: Vec<f64> = x.to_vec1().unwrap();
        assert!(after.iter().all(|v| v.abs() < 0.05), "{after:?}");
    }
}
