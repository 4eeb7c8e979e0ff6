use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{MdrError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coefficient of the L2 term added to the gradient of decayed parameters.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub first: Tensor,
    pub second: Tensor,
}

/// Adam with bias correction and classic (coupled) L2 weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    moments: Vec<Moments>,
    #[serde(skip)]
    warned_missing: BTreeSet<ParamId>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let moments = params
            .iter()
            .map(|(_, p)| Moments {
                first: Tensor::zeros(p.value.shape()),
                second: Tensor::zeros(p.value.shape()),
            })
            .collect();
        Self {
            config,
            step: 0,
            moments,
            warned_missing: BTreeSet::new(),
        }
    }

    pub fn moments(&self, id: ParamId) -> &Moments {
        &self.moments[id.index()]
    }

    /// Applies one update to every parameter in `params`.
    ///
    /// Parameters without a gradient are updated as if their gradient were
    /// zero (weight decay and momentum still act on them).
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.moments.len() != params.len() {
            return Err(MdrError::Usage(format!(
                "optimizer tracks {} parameters but the store has {}",
                self.moments.len(),
                params.len()
            )));
        }
        for id in params.ids() {
            if params.get(id).shape() != self.moments[id.index()].first.shape() {
                return Err(MdrError::Shape {
                    op: "adam_step",
                    left: params.get(id).shape().to_vec(),
                    right: self.moments[id.index()].first.shape().to_vec(),
                });
            }
            if let Some(g) = grads.get(id) {
                if g.shape() != params.get(id).shape() {
                    return Err(MdrError::Shape {
                        op: "adam_step",
                        left: params.get(id).shape().to_vec(),
                        right: g.shape().to_vec(),
                    });
                }
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        for id in params.ids() {
            let grad = grads.get(id);
            if grad.is_none() && self.warned_missing.insert(id) {
                log::warn!(
                    "no gradient for parameter '{}'; treating it as zero",
                    params.param(id).name
                );
            }
            let decay = if params.param(id).decay {
                weight_decay
            } else {
                0.0
            };
            let Moments { first, second } = &mut self.moments[id.index()];
            let value = params.get_mut(id).data_mut();
            for i in 0..value.len() {
                let g = grad.map_or(0.0, |g| g.data()[i]) + decay * value[i];
                let m = &mut first.data_mut()[i];
                *m = beta1 * *m + (1.0 - beta1) * g;
                let v = &mut second.data_mut()[i];
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = first.data()[i] / bias1;
                let v_hat = second.data()[i] / bias2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, decay: bool) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![value]), decay);
        (store, id)
    }

    #[test]
    fn zero_gradient_no_decay_leaves_param() {
        let (mut store, id) = single(1.0, true);
        let mut adam = AdamState::new(
            AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
            &store,
        );
        let mut grads = Gradients::default();
        grads.insert(id, Tensor::zeros(&[1]));
        for _ in 0..5 {
            adam.step(&mut store, &grads).unwrap();
        }
        assert_eq!(store.get(id).data(), &[1.0]);
        assert_eq!(adam.step, 5);
    }

    #[test]
    fn single_step_without_momentum_is_sign_step() {
        let (mut store, id) = single(0.0, true);
        let mut adam = AdamState::new(
            AdamConfig {
                lr: 0.1,
                beta1: 0.0,
                beta2: 0.0,
                eps: 1e-8,
                weight_decay: 0.0,
            },
            &store,
        );
        let mut grads = Gradients::default();
        grads.insert(id, Tensor::vector(vec![1.0]));
        adam.step(&mut store, &grads).unwrap();
        // 0.1 * 1 / (1 + 1e-8)
        assert!((store.get(id).data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn weight_decay_shrinks_param_with_zero_gradient() {
        let (mut store, id) = single(1.0, true);
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        adam.step(&mut store, &Gradients::default()).unwrap();
        assert!(store.get(id).data()[0] < 1.0);
    }

    #[test]
    fn excluded_param_is_not_decayed() {
        let (mut store, id) = single(1.0, false);
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        adam.step(&mut store, &Gradients::default()).unwrap();
        assert_eq!(store.get(id).data(), &[1.0]);
    }

    #[test]
    fn mismatched_gradient_shape_is_rejected() {
        let (mut store, id) = single(1.0, true);
        let mut adam = AdamState::new(AdamConfig::default(), &store);
        let mut grads = Gradients::default();
        grads.insert(id, Tensor::zeros(&[2]));
        assert!(adam.step(&mut store, &grads).is_err());
        assert_eq!(adam.step, 0);
    }
}
