use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
    /// Adam first-moment decay, or SGD momentum.
    pub momentum: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f32) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            momentum: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-store optimizer state. Parameters whose gradient is absent from a
/// step are left untouched (their moments do not decay either).
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    step: u32,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Apply `grads` (scaled by `scale`) to every parameter of `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, scale: f32) {
        let n = store.num_tensors();
        if self.first.len() < n {
            self.first.resize(n, None);
            self.second.resize(n, None);
        }
        self.step += 1;
        let cfg = self.cfg;
        let t = self.step as i32;
        for (pid, grad) in grads.for_store(store.id()) {
            let i = pid.0;
            let value = store.value_mut(pid);
            match cfg.kind {
                OptimizerKind::Adam => {
                    let m = self.first[i].get_or_insert_with(|| Tensor::zeros(value.dims()));
                    let v = self.second[i].get_or_insert_with(|| Tensor::zeros(value.dims()));
                    let b1 = cfg.momentum;
                    let b2 = cfg.beta2;
                    let c1 = 1.0 - b1.powi(t);
                    let c2 = 1.0 - b2.powi(t);
                    let lr = cfg.learning_rate;
                    for (((p, &gr), mm), vv) in value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        let gr = gr * scale;
                        *mm = b1 * *mm + (1.0 - b1) * gr;
                        *vv = b2 * *vv + (1.0 - b2) * gr * gr;
                        let mhat = *mm / c1;
                        let vhat = *vv / c2;
                        *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    let m = self.first[i].get_or_insert_with(|| Tensor::zeros(value.dims()));
                    for ((p, &gr), mm) in value.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()) {
                        *mm = cfg.momentum * *mm + gr * scale;
                        *p -= cfg.learning_rate * *mm;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Graph;

    fn quadratic_step(opt: &mut Optimizer, store: &mut ParamStore) -> f32 {
        let id = store.param_ids().next().unwrap();
        let mut g = Graph::new();
        let p = g.param(store, id);
        let x = store.value(id).data()[0];
        // d/dx (x - 3)^2
        let grads = g.backward(&[(p, Tensor::full([1, 1, 1, 1], 2.0 * (x - 3.0)))]);
        opt.step(store, &grads, 1.0);
        store.value(id).data()[0]
    }

    #[test]
    fn adam_and_sgd_minimise_quadratic() {
        for cfg in [
            OptimizerConfig::adam(0.1),
            OptimizerConfig {
                kind: OptimizerKind::SgdMomentum,
                learning_rate: 0.05,
                momentum: 0.5,
                beta2: 0.0,
                eps: 0.0,
            },
        ] {
            let mut store = ParamStore::new("q");
            store.add("x", Tensor::zeros([1, 1, 1, 1]));
            let mut opt = Optimizer::new(cfg);
            let mut x = 0.0;
            for _ in 0..300 {
                x = quadratic_step(&mut opt, &mut store);
            }
            assert!((x - 3.0).abs() < 1e-2, "{cfg:?} ended at {x}");
        }
    }

    #[test]
    fn zero_gradient_leaves_adam_parameter_fixed() {
        let mut store = ParamStore::new("z");
        let id = store.add("x", Tensor::full([1, 1, 1, 2], 0.7));
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1));
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let grads = g.backward(&[(p, Tensor::zeros([1, 1, 1, 2]))]);
        opt.step(&mut store, &grads, 1.0);
        assert_eq!(store.value(id).data(), &[0.7, 0.7]);
    }
}
