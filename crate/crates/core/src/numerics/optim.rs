use serde::{Deserialize, Serialize};

use super::graph::{Gradients, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily on the first
/// step so the optimizer can be built before the store is final.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    frozen: Vec<ParamId>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
            frozen: Vec::new(),
        }
    }

    /// Parameters listed here are never updated.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            if self.frozen.contains(&id) {
                continue;
            }
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let data = store.get_mut(id).data_mut();
            for i in 0..data.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row_vector(&[0.1, 0.2]));
        let before = store.get(x).clone();
        let grads = {
            let mut g = Graph::new(&store);
            let v = g.param(x);
            let s = g.square(v);
            let l = g.sum(s);
            g.backward(l).unwrap()
        };
        let mut adam = Adam::new(AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        });
        adam.step(&mut store, &grads);
        assert_eq!(store.get(x), &before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::row_vector(&[3.0, -2.0]));
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let v = g.param(x);
                let s = g.square(v);
                let l = g.sum(s);
                g.backward(l).unwrap()
            };
            adam.step(&mut store, &grads);
        }
        assert!(store.get(x).data().iter().all(|v| v.abs() < 1e-2));
    }
}
