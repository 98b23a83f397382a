use std::collections::BTreeMap;

use crate::autodiff::{BnUpdate, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::params::ParameterStore;

/// Momentum SGD: `v = momentum * v + (g + weight_decay * w)`, `w -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(learning_rate: f32, momentum: f32) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay: 0.0,
            velocity: BTreeMap::new(),
        })
    }

    pub fn with_weight_decay(mut self, weight_decay: f32) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    /// Updates every non-frozen parameter that has a gradient. Nothing is
    /// touched if any such gradient is non-finite.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        for (name, entry) in store.params() {
            if entry.frozen {
                continue;
            }
            if let Some(g) = &entry.tensor.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient { name: name.to_string() });
                }
            }
        }
        for (name, entry) in store.params_mut() {
            if entry.frozen {
                continue;
            }
            let Some(grad) = entry.tensor.grad.as_ref() else {
                continue;
            };
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let grad = grad.clone();
            for ((w, g), vel) in entry.tensor.data_mut().iter_mut().zip(&grad).zip(v.iter_mut()) {
                let d = g + self.weight_decay * *w;
                *vel = self.momentum * *vel + d;
                *w -= self.learning_rate * *vel;
            }
        }
        Ok(())
    }
}

/// One plain-momentum SGD step, without persistent state (momentum buffer
/// starts at zero, so this is `w -= lr * g`).
pub fn sgd_step(params: &mut ParameterStore, learning_rate: f32, momentum: f32) -> Result<()> {
    Sgd::new(learning_rate, momentum)?.step(params)
}

/// Folds queued batch statistics into running buffers. Layers whose scale
/// parameter is frozen keep their statistics.
pub fn apply_bn_updates(store: &mut ParameterStore, updates: &[BnUpdate<f32>]) -> Result<()> {
    let m = BN_MOMENTUM as f32;
    for up in updates {
        if store.entry(&format!("{}.weight", up.layer))?.frozen {
            continue;
        }
        let rm = store.buffer_mut(&format!("{}.running_mean", up.layer))?;
        for (r, v) in rm.data_mut().iter_mut().zip(&up.mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        let rv = store.buffer_mut(&format!("{}.running_var", up.layer))?;
        for (r, v) in rv.data_mut().iter_mut().zip(&up.var) {
            *r = (1.0 - m) * *r + m * v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Scope;
    use crate::tensor::Tensor;

    fn single(name: &str, w: f32, g: f32) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, Tensor::full(&[1], w)).unwrap();
        s.entry_mut(name).unwrap().tensor.grad = Some(vec![g]);
        s
    }

    #[test]
    fn one_plain_step() {
        let mut s = single("w", 1.0, 2.0);
        sgd_step(&mut s, 0.1, 0.0).unwrap();
        assert!((s.tensor("w").unwrap().data()[0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn frozen_is_untouched() {
        let mut s = single("backbone.w", 1.0, 2.0);
        s.freeze(Scope::Backbone);
        s.entry_mut("backbone.w").unwrap().tensor.grad = Some(vec![5.0]);
        sgd_step(&mut s, 0.1, 0.9).unwrap();
        assert_eq!(s.tensor("backbone.w").unwrap().data()[0].to_bits(), 1.0f32.to_bits());
    }

    #[test]
    fn momentum_second_update() {
        let (lr, g) = (0.05f32, 0.4f32);
        let mut s = single("w", 0.0, g);
        let mut opt = Sgd::new(lr, 0.9).unwrap();
        opt.step(&mut s).unwrap();
        let after_one = s.tensor("w").unwrap().data()[0];
        opt.step(&mut s).unwrap();
        let second = after_one - s.tensor("w").unwrap().data()[0];
        assert!((second - lr * g * 1.9).abs() < 1e-7);
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut s = single("a", 1.0, 1.0);
        s.insert("b", Tensor::full(&[1], 3.0)).unwrap();
        s.entry_mut("b").unwrap().tensor.grad = Some(vec![f32::NAN]);
        assert!(matches!(sgd_step(&mut s, 0.1, 0.0), Err(Error::NonFiniteGradient { .. })));
        assert_eq!(s.tensor("a").unwrap().data(), &[1.0]);
        assert_eq!(s.tensor("b").unwrap().data(), &[3.0]);
    }
}
