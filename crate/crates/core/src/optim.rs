//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::AutodiffError;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has an entry in `grads`;
    /// parameters without a gradient are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<(), AutodiffError> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| AutodiffError::Optimizer(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(AutodiffError::Optimizer(format!(
                    "`{name}`: gradient shape {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        let bc1 = T::one() - T::lit(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.step as i32));
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(value));
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = v̂ = 1 after bias correction, so Δ = -lr / (1 + ε).
        let mut params = single(0.5);
        let mut state = AdamState::new(AdamConfig::with_lr(1e-3));
        let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(1.0))]);
        state.step(&mut params, &grads).unwrap();
        let delta = params.get("w").unwrap().item() - 0.5;
        assert!((delta + 1e-3).abs() < 1e-6, "{delta}");
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut params = single(0.25);
        let mut state = AdamState::new(AdamConfig::with_lr(1e-2));
        let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(0.0))]);
        for _ in 0..5 {
            state.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params.get("w").unwrap().item(), 0.25);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = single(0.0);
        let mut state = AdamState::<f64>::new(AdamConfig::default());
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        assert!(state.step(&mut params, &grads).is_err());
        assert_eq!(state.step_count(), 0);
    }
}
