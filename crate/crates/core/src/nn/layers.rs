//! Parameterised layers. Each layer only records ids into a
//! [`ParamStore`]; the store owns the values.

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Mode, Var};
use super::params::{BufferId, ParamId, ParamStore};
use super::tensor::Tensor;

pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, in_c: usize, out_c: usize, k: usize, bias: bool) -> Self {
        let weight = store.add_conv_weight(&format!("{name}.w"), seed, out_c, in_c, k);
        let bias = bias.then(|| store.add(&format!("{name}.b"), Tensor::zeros([1, out_c, 1, 1])));
        Self {
            weight,
            bias,
            in_c,
            out_c,
            k,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let dims = [1, channels, 1, 1];
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(dims, 1.0)),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(dims)),
            running_mean: store.add_buffer(&format!("{name}.mean"), Tensor::zeros(dims)),
            running_var: store.add_buffer(&format!("{name}.var"), Tensor::full(dims, 1.0)),
            channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => g.batch_norm(
                x,
                gamma,
                beta,
                None,
                Some((store.id(), self.running_mean, self.running_var, BN_MOMENTUM)),
            ),
            Mode::Eval => {
                let rm = store.buffer(self.running_mean).data().to_vec();
                let rv = store.buffer(self.running_var).data().to_vec();
                g.batch_norm(x, gamma, beta, Some((&rm, &rv)), None)
            }
        }
    }

    pub fn buffers(&self) -> [BufferId; 2] {
        [self.running_mean, self.running_var]
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gamma, self.beta]
    }
}

/// Norm → ReLU → Conv, the DenseNet composite function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormActConv {
    pub norm: BatchNorm,
    pub conv: Conv,
}

impl NormActConv {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, in_c: usize, out_c: usize, k: usize) -> Self {
        Self {
            norm: BatchNorm::new(store, &format!("{name}.bn"), in_c),
            conv: Conv::new(store, seed, &format!("{name}.conv"), in_c, out_c, k, false),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Var {
        let h = self.norm.forward(g, store, x, mode);
        let h = g.relu(h);
        self.conv.forward(g, store, h)
    }
}

/// Conv → Norm → ReLU, the U-Net unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvNormAct {
    pub conv: Conv,
    pub norm: BatchNorm,
}

impl ConvNormAct {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, in_c: usize, out_c: usize) -> Self {
        Self {
            conv: Conv::new(store, seed, &format!("{name}.conv"), in_c, out_c, 3, false),
            norm: BatchNorm::new(store, &format!("{name}.bn"), out_c),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Var {
        let h = self.conv.forward(g, store, x);
        let h = self.norm.forward(g, store, h, mode);
        g.relu(h)
    }
}

/// Densely connected block: each layer sees the concatenation of the
/// block input and all earlier layer outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseBlock {
    pub layers: Vec<NormActConv>,
    pub in_c: usize,
    pub growth: usize,
}

impl DenseBlock {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, in_c: usize, growth: usize, num_layers: usize) -> Self {
        let layers = (0..num_layers)
            .map(|i| NormActConv::new(store, seed, &format!("{name}.l{i}"), in_c + i * growth, growth, 3))
            .collect();
        Self { layers, in_c, growth }
    }

    pub fn out_channels(&self) -> usize {
        self.in_c + self.layers.len() * self.growth
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Var {
        let mut features = vec![x];
        let mut current = x;
        for layer in &self.layers {
            let new = layer.forward(g, store, current, mode);
            features.push(new);
            current = g.concat(&features);
        }
        current
    }
}

/// Norm → ReLU → 1x1 compression, optionally followed by 2x average pooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub unit: NormActConv,
    pub pool: bool,
}

impl Transition {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, in_c: usize, out_c: usize, pool: bool) -> Self {
        Self {
            unit: NormActConv::new(store, seed, name, in_c, out_c, 1),
            pool,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.unit.conv.out_c
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Var {
        let h = self.unit.forward(g, store, x, mode);
        if self.pool {
            g.avg_pool2(h)
        } else {
            h
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_block_channel_growth() {
        let mut store = ParamStore::new("d");
        let block = DenseBlock::new(&mut store, 1, "b", 4, 3, 3);
        assert_eq!(block.out_channels(), 13);
        let mut g = Graph::new();
        let x = g.input(Tensor::full([2, 4, 8, 8], 0.5));
        let y = block.forward(&mut g, &store, x, Mode::Train);
        assert_eq!(g.value(y).dims(), [2, 13, 8, 8]);
        // block input is carried through unchanged
        assert_eq!(g.value(y).slice_channels(0, 4).data(), g.value(x).data());
    }

    #[test]
    fn eval_norm_uses_running_buffers() {
        let mut store = ParamStore::new("n");
        let bn = BatchNorm::new(&mut store, "bn", 1);
        store.buffer_mut(bn.running_mean).data_mut()[0] = 2.0;
        store.buffer_mut(bn.running_var).data_mut()[0] = 4.0 - crate::nn::graph::BN_EPS;
        let mut g = Graph::new();
        let x = g.input(Tensor::full([1, 1, 1, 2], 4.0));
        let y = bn.forward(&mut g, &store, x, Mode::Eval);
        assert!(g.value(y).data().iter().all(|v| (v - 1.0).abs() < 1e-6));
        assert!(g.take_observations().is_empty());
    }

    #[test]
    fn train_norm_records_statistics() {
        let mut store = ParamStore::new("n");
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec([2, 1, 1, 1], vec![1.0, 3.0]));
        bn.forward(&mut g, &store, x, Mode::Train);
        let obs = g.take_observations();
        store.apply_observations(&obs);
        assert!((store.buffer(bn.running_mean).data()[0] - 0.2).abs() < 1e-6);
        // unbiased variance 2.0 → 0.9 * 1 + 0.1 * 2
        assert!((store.buffer(bn.running_var).data()[0] - 1.1).abs() < 1e-6);
    }
}
