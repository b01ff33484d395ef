//! AdamW with decoupled weight decay. Moments are keyed by parameter name so
//! they survive checkpointing and store rebuilds.

use std::collections::BTreeMap;

use crate::autodiff::ParamGrads;
use crate::config::OptimizerSection;
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<F> {
    pub first: Tensor<F>,
    pub second: Tensor<F>,
}

#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far (drives bias correction).
    pub step: u64,
    pub moments: BTreeMap<String, Moments<F>>,
}

impl<F: Float> AdamW<F> {
    pub fn new(cfg: &OptimizerSection) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient entry.
    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &ParamGrads<F>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let (one_b1, one_b2) = (F::lit(1.0 - self.beta1), F::lit(1.0 - self.beta2));
        let step_size = F::lit(lr / bc1);
        let inv_bc2 = F::lit(1.0 / bc2);
        let eps = F::lit(self.eps);
        let decay = F::lit(1.0 - lr * self.weight_decay);
        for (id, grad) in &grads.grads {
            let name = store.get(*id).name.clone();
            let m = self.moments.entry(name).or_insert_with(|| Moments {
                first: Tensor::zeros(&grad.shape),
                second: Tensor::zeros(&grad.shape),
            });
            let p = store.tensor_mut(*id);
            for i in 0..p.data.len() {
                let g = grad.data[i];
                let m1 = b1 * m.first.data[i] + one_b1 * g;
                let m2 = b2 * m.second.data[i] + one_b2 * g * g;
                m.first.data[i] = m1;
                m.second.data[i] = m2;
                let denom = (m2 * inv_bc2).sqrt() + eps;
                p.data[i] = p.data[i] * decay - step_size * m1 / denom;
            }
        }
    }
}
