//! Gradient descent with decoupled weight decay.
//!
//! The decay term is scaled by the learning rate, so a zero learning rate
//! leaves parameters bit-identical no matter how many steps run.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::graph::Tensor;
use super::layers::ParamStore;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update from name-keyed gradients. Unknown or non-trainable
    /// names are a bug upstream and panic.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        for (name, grad) in grads {
            let entry = store.get_mut(name);
            assert!(entry.trainable, "gradient for frozen parameter {name}");
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            m.zip_mut_with(grad, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(grad, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let lr = self.learning_rate;
            let wd = self.weight_decay;
            let eps = self.eps;
            ndarray::Zip::from(&mut entry.value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bias1;
                    let v_hat = v / bias2;
                    *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
                });
        }
    }

    /// Optimizer state as name-keyed arrays for snapshots. Moment names are
    /// prefixed `m.` / `v.`.
    pub fn export_state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, v) in &self.first_moment {
            out.insert(format!("m.{k}"), v.clone());
        }
        for (k, v) in &self.second_moment {
            out.insert(format!("v.{k}"), v.clone());
        }
        out
    }

    pub fn import_state(&mut self, state: BTreeMap<String, Tensor>, step_count: u64) {
        self.step_count = step_count;
        self.first_moment.clear();
        self.second_moment.clear();
        for (k, v) in state {
            if let Some(name) = k.strip_prefix("m.") {
                self.first_moment.insert(name.to_string(), v);
            } else if let Some(name) = k.strip_prefix("v.") {
                self.second_moment.insert(name.to_string(), v);
            }
        }
    }
}
