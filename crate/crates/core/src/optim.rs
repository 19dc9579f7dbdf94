//! Named parameter storage and the Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{BamError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered, named set of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.variable(p.value.clone())).collect(),
        }
    }

    /// Places every parameter on `g` as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| g.constant(p.value.clone())).collect(),
        }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub(crate) fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collects per-parameter gradients after a backward pass. Parameters the
    /// loss does not reach get zeros.
    pub fn grads(&self, g: &Graph, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&store.params)
            .map(|(&v, p)| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect()
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |p: &Param| vec![0.0; p.value.numel()];
        AdamState {
            config,
            step: 0,
            m: store.params.iter().map(zeros).collect(),
            v: store.params.iter().map(zeros).collect(),
        }
    }

    /// One bias-corrected Adam update at learning rate `config.lr * lr_scale`.
    /// Refuses the whole step if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr_scale: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(BamError::shape(
                "adam_step",
                format!("{} params, {} grads, {} moments", store.len(), grads.len(), self.m.len()),
            ));
        }
        for ((p, g), m) in store.params.iter().zip(grads).zip(&self.m) {
            if p.value.shape() != g.shape() || m.len() != g.numel() {
                return Err(BamError::shape(
                    "adam_step",
                    format!("{}: param {:?}, grad {:?}", p.name, p.value.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(BamError::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let lr = lr * lr_scale;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in store
            .params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Step schedule: the rate halves every `period` epochs.
pub fn halving_lr(base: f64, epoch: usize, period: usize) -> f64 {
    if period == 0 {
        return base;
    }
    base * 0.5f64.powi((epoch / period) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(values.to_vec()));
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // At t=1: mhat = g, vhat = g^2, so the update is lr * g / (|g| + eps).
        let mut store = store_with(&[1.0, -2.0, 0.5]);
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        let g = Tensor::vector(vec![0.3, -4.0, 1e-2]);
        adam.step(&mut store, &[g.clone()], 1.0).unwrap();
        let lr = 1e-3;
        let expected: Vec<f64> = [1.0, -2.0, 0.5]
            .iter()
            .zip(g.data())
            .map(|(w, gi)| w - lr * gi / (gi.abs() + 1e-8))
            .collect();
        for (a, e) in store.get(ParamId(0)).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-15);
        }
        let moved: Vec<f64> = store
            .get(ParamId(0))
            .data()
            .iter()
            .zip([1.0, -2.0, 0.5])
            .map(|(a, b)| b - a)
            .collect();
        for (d, gi) in moved.iter().zip(g.data()) {
            assert!((d - lr * gi.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = store_with(&[1.0, 2.0]);
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        adam.step(&mut store, &[Tensor::zeros(&[2])], 1.0).unwrap();
        assert_eq!(store.get(ParamId(0)).data(), &[1.0, 2.0]);
    }

    #[test]
    fn nan_gradient_refused() {
        let mut store = store_with(&[1.0]);
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        let err = adam
            .step(&mut store, &[Tensor::vector(vec![f64::NAN])], 1.0)
            .unwrap_err();
        assert!(matches!(err, BamError::NonFinite(_)));
        assert_eq!(adam.step, 0);
        assert_eq!(store.get(ParamId(0)).data(), &[1.0]);
    }

    #[test]
    fn halving_schedule() {
        assert_eq!(halving_lr(1e-5, 10, 10), 0.5 * halving_lr(1e-5, 0, 10));
        assert_eq!(halving_lr(1e-3, 9, 10), 1e-3);
        assert_eq!(halving_lr(1e-3, 25, 10), 2.5e-4);
    }

    #[test]
    fn step_counter_increases() {
        let mut store = store_with(&[0.0]);
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        for k in 1..=3 {
            adam.step(&mut store, &[Tensor::vector(vec![1.0])], 1.0).unwrap();
            assert_eq!(adam.step, k);
        }
    }
}
