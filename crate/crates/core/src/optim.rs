//! SGD with momentum, Adam, and step-decay schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Learning-rate schedule and optimizer settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Multiplier applied every `decay_every` steps.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    /// Rescale gradients whose global norm exceeds this (0 disables).
    pub clip_norm: f64,
    pub weight_decay: f64,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !(self.momentum >= 0.0) || self.momentum >= 1.0 {
            return Err(Error::Config("learning rate must be >= 0 and momentum in [0, 1)".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay factor {} not in (0, 1]", self.decay_factor)));
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.decay_every == 0 {
            return Err(Error::Config("batch size, steps and decay interval must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((step / self.decay_every) as i32)
    }
}

pub struct Optimizer<T> {
    schedule: TrainSchedule,
    step: usize,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(schedule: TrainSchedule) -> Self {
        Optimizer { schedule, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn schedule(&self) -> &TrainSchedule {
        &self.schedule
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    /// Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> f64 {
        let norm = grads.values().flat_map(|g| g.data()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        let clip = if self.schedule.clip_norm > 0.0 && norm > self.schedule.clip_norm {
            self.schedule.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.schedule.lr_at(self.step);
        self.step += 1;
        if lr == 0.0 {
            return norm;
        }
        let lr_t = T::from_f64_lossy(lr);
        let clip_t = T::from_f64_lossy(clip);
        let wd = T::from_f64_lossy(self.schedule.weight_decay);
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            match self.schedule.optimizer {
                OptimizerKind::Sgd => {
                    let mu = T::from_f64_lossy(self.schedule.momentum);
                    let v = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
                    for ((pv, &g), vv) in p.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
                        let g = g * clip_t + wd * *pv;
                        *vv = mu * *vv + g;
                        *pv -= lr_t * *vv;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
                    let t = self.step as i32;
                    let c1 = T::from_f64_lossy(1.0 - b1.powi(t));
                    let c2 = T::from_f64_lossy(1.0 - b2.powi(t));
                    let (b1, b2, eps) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2), T::from_f64_lossy(eps));
                    let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
                    let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
                    for (((pv, &g), mv), vv) in
                        p.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut())
                    {
                        let g = g * clip_t + wd * *pv;
                        *mv = b1 * *mv + (T::one() - b1) * g;
                        *vv = b2 * *vv + (T::one() - b2) * g * g;
                        let mhat = *mv / c1;
                        let vhat = *vv / c2;
                        *pv -= lr_t * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule(kind: OptimizerKind, lr: f64) -> TrainSchedule {
        TrainSchedule {
            optimizer: kind,
            learning_rate: lr,
            decay_factor: 0.5,
            decay_every: 10,
            momentum: 0.9,
            batch_size: 1,
            total_steps: 100,
            clip_norm: 0.0,
            weight_decay: 0.0,
        }
    }

    #[test]
    fn step_decay() {
        let s = schedule(OptimizerKind::Sgd, 0.01);
        assert_eq!(s.lr_at(0), 0.01);
        assert_eq!(s.lr_at(9), 0.01);
        assert_eq!(s.lr_at(10), 0.005);
        assert_eq!(s.lr_at(25), 0.0025);
    }

    #[test]
    fn both_optimizers_minimize_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut s = schedule(kind, 0.05);
            s.decay_every = 1000;
            let mut opt = Optimizer::<f64>::new(s);
            let mut p = ParamStore::new();
            p.insert("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
            for _ in 0..500 {
                let x = p.get("x").unwrap().clone();
                let mut g = BTreeMap::new();
                g.insert("x".to_string(), x.map(|v| 2.0 * v));
                opt.step(&mut p, &g);
            }
            assert!(p.get("x").unwrap().max_abs() < 1e-2, "{:?}", kind);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let mut opt = Optimizer::<f32>::new(schedule(OptimizerKind::Sgd, 0.0));
        let mut p = ParamStore::new();
        p.insert("x", Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap());
        let before = p.clone();
        let mut g = BTreeMap::new();
        g.insert("x".to_string(), Tensor::full(&[2], 5.0));
        for _ in 0..10 {
            opt.step(&mut p, &g);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        let mut s = schedule(OptimizerKind::Sgd, 0.01);
        s.decay_factor = 1.5;
        assert!(s.validate().is_err());
        s.decay_factor = 0.5;
        s.batch_size = 0;
        assert!(s.validate().is_err());
    }
}
