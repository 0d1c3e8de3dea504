//! Adam optimizer over named parameters. Updates run in name order, so a
//! training step is a deterministic function of store and gradients.

use std::collections::BTreeMap;

use crate::numerics::params::ParamStore;
use crate::numerics::tensor::Tensor;

pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    steps: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f32) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Apply one update from the gradients currently accumulated in the
    /// store, then clear them. Parameters without gradients are untouched.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.steps += 1;
        let t = self.steps as f64;
        let bc1 = 1.0 - (self.beta1 as f64).powf(t);
        let bc2 = 1.0 - (self.beta2 as f64).powf(t);
        let names = store.trainable_names();
        for name in names {
            let Some(grad) = store.grad(&name).cloned() else {
                continue;
            };
            let mut p = store.tensor(&name).clone();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
            for i in 0..grad.len() {
                let gi = grad.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi as f64 / bc1;
                let vhat = vi as f64 / bc2;
                let upd = (lr as f64) * mhat / (vhat.sqrt() + eps as f64);
                p.data_mut()[i] -= upd as f32;
            }
            store.set_tensor(&name, p);
        }
        store.zero_grads();
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }
}
