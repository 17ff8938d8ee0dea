use std::collections::HashMap;

use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Adam hyperparameters apart from the learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One named trainable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor2,
    pub grad: Tensor2,
    pub m: Tensor2,
    pub v: Tensor2,
    pub trainable: bool,
}

/// Named parameters in insertion order, plus the shared Adam step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its slot index.
    pub fn insert(&mut self, name: &str, value: Tensor2, trainable: bool) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let (r, c) = value.shape();
        let slot = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: Tensor2::zeros(r, c),
            m: Tensor2::zeros(r, c),
            v: Tensor2::zeros(r, c),
            trainable,
        });
        self.index.insert(name.to_string(), slot);
        Ok(slot)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn value(&self, slot: usize) -> &Tensor2 {
        &self.params[slot].value
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor2 {
        &mut self.params[slot].value
    }

    pub fn param(&self, slot: usize) -> &Param {
        &self.params[slot]
    }

    pub fn param_mut(&mut self, slot: usize) -> &mut Param {
        &mut self.params[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn set_trainable(&mut self, slot: usize, trainable: bool) {
        self.params[slot].trainable = trainable;
    }

    /// Adds `grad` into the accumulator of `slot`.
    pub fn accumulate(&mut self, slot: usize, grad: &Tensor2) -> Result<()> {
        let p = &mut self.params[slot];
        if !p.grad.same_shape(grad) {
            return Err(Error::Contract(format!(
                "gradient for {} has shape {:?}, parameter is {:?}",
                p.name,
                grad.shape(),
                p.value.shape()
            )));
        }
        p.grad.add_assign(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Bias-corrected Adam update of every trainable parameter, then zeroes
    /// all gradients. Frozen parameters keep their values and moments.
    pub fn adam_step(&mut self, lr: f64, cfg: AdamConfig) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Parameter(format!("learning rate must be > 0, got {lr}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            if p.trainable {
                let Param { value, grad, m, v, .. } = p;
                for (((w, g), m), v) in value
                    .data_mut()
                    .iter_mut()
                    .zip(grad.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
                }
            }
            p.grad.fill(0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor2::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap(), true)
            .unwrap();
        let before = s.value(0).clone();
        for _ in 0..10 {
            s.adam_step(0.1, AdamConfig::default()).unwrap();
        }
        assert_eq!(s.value(0), &before);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut s = ParamStore::new();
        let slot = s.insert("w", Tensor2::scalar(0.0), true).unwrap();
        for _ in 0..100 {
            s.accumulate(slot, &Tensor2::scalar(-0.3)).unwrap();
            s.adam_step(0.01, AdamConfig::default()).unwrap();
        }
        assert!(s.value(slot).data()[0] > 0.5);
    }

    #[test]
    fn single_step_hand_value() {
        // m = 0.1, v = 0.001, mhat = vhat = 1, w = 1 - 0.1 * 1 / (1 + 1e-8)
        let mut s = ParamStore::new();
        let slot = s.insert("w", Tensor2::scalar(1.0), true).unwrap();
        s.accumulate(slot, &Tensor2::scalar(1.0)).unwrap();
        s.adam_step(0.1, AdamConfig::default()).unwrap();
        let w = s.value(slot).data()[0];
        assert!((w - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((w - 0.9).abs() < 1e-8);
        assert_eq!(s.param(slot).grad.data()[0], 0.0);
    }

    #[test]
    fn frozen_and_errors() {
        let mut s = ParamStore::new();
        let slot = s.insert("w", Tensor2::scalar(1.0), false).unwrap();
        s.accumulate(slot, &Tensor2::scalar(1.0)).unwrap();
        s.adam_step(0.1, AdamConfig::default()).unwrap();
        assert_eq!(s.value(slot).data()[0], 1.0);
        assert!(s.adam_step(0.0, AdamConfig::default()).is_err());
        assert!(s.insert("w", Tensor2::scalar(0.0), true).is_err());
        assert!(s.accumulate(slot, &Tensor2::zeros(2, 2)).is_err());
    }
}
