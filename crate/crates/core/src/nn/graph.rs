//! A per-step autograd tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes hold their
//! forward value; `backward` walks the tape in reverse and returns the
//! gradients of every trainable parameter that took part. Losses are
//! computed outside the tape and enter `backward` as seed gradients.

use std::collections::{BTreeMap, BTreeSet};

use super::params::{BufferId, ParamId, ParamStore, StoreId};
use super::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by a training-mode normalization node,
/// to be folded into the running buffers of `store`.
#[derive(Clone, Debug)]
pub struct BnObservation {
    pub store: StoreId,
    pub mean_buf: BufferId,
    pub var_buf: BufferId,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub momentum: f32,
}

enum Op {
    Leaf,
    Param(StoreId, ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        k: usize,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Relu(Var),
    LeakyRelu(Var, f32),
    Sigmoid(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    GlobalAvg(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    Scale(Var, f32),
    GateMul {
        x: Var,
        gate: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Parameter gradients returned by [`Graph::backward`].
#[derive(Default, Debug, Clone)]
pub struct Gradients {
    by_param: BTreeMap<(StoreId, ParamId), Tensor>,
}

impl Gradients {
    pub fn get(&self, store: StoreId, param: ParamId) -> Option<&Tensor> {
        self.by_param.get(&(store, param))
    }

    pub fn touches(&self, store: StoreId) -> bool {
        self.by_param.keys().any(|(s, _)| *s == store)
    }

    pub fn for_store(&self, store: StoreId) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param
            .iter()
            .filter(move |((s, _), _)| *s == store)
            .map(|((_, p), t)| (*p, t))
    }

    /// Sum of squared gradient entries for one store.
    pub fn sq_norm(&self, store: StoreId) -> f64 {
        self.for_store(store)
            .flat_map(|(_, t)| t.data().iter())
            .map(|&v| f64::from(v) * f64::from(v))
            .sum()
    }

    pub fn merge(&mut self, other: Gradients) {
        for (key, grad) in other.by_param {
            match self.by_param.get_mut(&key) {
                Some(existing) => existing.add_assign(&grad),
                None => {
                    self.by_param.insert(key, grad);
                }
            }
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    frozen: BTreeSet<StoreId>,
    observations: Vec<BnObservation>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters of `store` enter this graph as constants.
    pub fn freeze(&mut self, store: StoreId) {
        self.frozen.insert(store);
    }

    pub fn is_frozen(&self, store: StoreId) -> bool {
        self.frozen.contains(&store)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn take_observations(&mut self) -> Vec<BnObservation> {
        std::mem::take(&mut self.observations)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.value(id).clone();
        if self.frozen.contains(&store.id()) {
            self.push(value, Op::Leaf, false)
        } else {
            self.push(value, Op::Param(store.id(), id), true)
        }
    }

    /// Stride-1 "same" convolution with an odd square kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let [n, cin, h, wd] = xv.dims();
        let [cout, wcin, k, k2] = wv.dims();
        assert_eq!(cin, wcin, "conv2d: input has {cin} channels, weight expects {wcin}");
        assert!(k == k2 && k % 2 == 1, "conv2d: kernel must be odd and square");
        let bias = b.map(|b| self.value(b).data().to_vec());
        let out = conv_forward(xv, wv, bias.as_deref());
        debug_assert_eq!(out.dims(), [n, cout, h, wd]);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Conv { x, w, b, k }, rg)
    }

    /// Per-channel normalization over `(n, h, w)`.
    ///
    /// With `running: None` the batch statistics are used; when `record`
    /// is given the observed statistics are queued for the owning store.
    /// With `running: Some((mean, var))` the supplied statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f32], &[f32])>,
        record: Option<(StoreId, BufferId, BufferId, f32)>,
    ) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims();
        let m = (n * h * w) as f64;
        let (mean, var, batch_stats) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), false),
            None => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let mut sum = 0.0f64;
                    for s in 0..n {
                        sum += xv.plane(s, ch).iter().map(|&v| f64::from(v)).sum::<f64>();
                    }
                    let mu = sum / m;
                    let mut sq = 0.0f64;
                    for s in 0..n {
                        sq += xv
                            .plane(s, ch)
                            .iter()
                            .map(|&v| (f64::from(v) - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = mu as f32;
                    var[ch] = (sq / m) as f32;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut out = Tensor::zeros([n, c, h, w]);
        for s in 0..n {
            for ch in 0..c {
                let scale = g[ch] * inv_std[ch];
                let shift = bt[ch] - mean[ch] * scale;
                let src = self.nodes[x.0].value.plane(s, ch);
                for (o, &v) in out.plane_mut(s, ch).iter_mut().zip(src) {
                    *o = v * scale + shift;
                }
            }
        }
        if let (true, Some((store, mean_buf, var_buf, momentum))) = (batch_stats, record) {
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            self.observations.push(BnObservation {
                store,
                mean_buf,
                var_buf,
                mean: mean.clone(),
                var: var.iter().map(|&v| (f64::from(v) * unbias) as f32).collect(),
                momentum,
            });
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::Norm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { v * slope });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        let mut idx = 0;
        for s in 0..n {
            for ch in 0..c {
                let src = xv.plane(s, ch);
                let dst = out.plane_mut(s, ch);
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = (2 * y) * w + 2 * xx;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let cand = (2 * y + dy) * w + 2 * xx + dx;
                            if src[cand] > src[best] {
                                best = cand;
                            }
                        }
                        dst[y * ow + xx] = src[best];
                        argmax[idx] = best as u32;
                        idx += 1;
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::MaxPool2 { x, argmax }, rg)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for s in 0..n {
            for ch in 0..c {
                let src = xv.plane(s, ch);
                let dst = out.plane_mut(s, ch);
                for y in 0..oh {
                    for xx in 0..ow {
                        let a = (2 * y) * w + 2 * xx;
                        dst[y * ow + xx] = 0.25 * (src[a] + src[a + 1] + src[a + w] + src[a + w + 1]);
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::AvgPool2(x), rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims();
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        for s in 0..n {
            for ch in 0..c {
                let src = xv.plane(s, ch);
                let dst = out.plane_mut(s, ch);
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample2(x), rg)
    }

    /// `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims();
        let inv = 1.0 / (h * w) as f32;
        let mut out = Tensor::zeros([n, c, 1, 1]);
        for s in 0..n {
            for ch in 0..c {
                out.data_mut()[s * c + ch] = xv.plane(s, ch).iter().sum::<f32>() * inv;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::GlobalAvg(x), rg)
    }

    /// Channel-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).dims();
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut total_c = 0;
        for &p in parts {
            let d = self.value(p).dims();
            assert_eq!((d[0], d[2], d[3]), (n, h, w), "concat: spatial/batch dims mismatch");
            total_c += d[1];
        }
        let plane = h * w;
        let mut out = Tensor::zeros([n, total_c, h, w]);
        for s in 0..n {
            let mut offset = 0;
            for &p in parts {
                let pv = self.value(p);
                let pc = pv.c();
                let dst_start = (s * total_c + offset) * plane;
                out.data_mut()[dst_start..dst_start + pc * plane].copy_from_slice(pv.sample(s));
                offset += pc;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// `x * gate` where `gate` is `[n, 1, h, w]` and broadcasts over channels.
    pub fn gate_mul(&mut self, x: Var, gate: Var) -> Var {
        let xv = self.value(x);
        let gv = self.value(gate);
        let [n, c, h, w] = xv.dims();
        assert_eq!(gv.dims(), [n, 1, h, w], "gate_mul: gate must be [n,1,h,w]");
        let mut out = xv.clone();
        for s in 0..n {
            let gp = gv.plane(s, 0).to_vec();
            for ch in 0..c {
                for (o, g) in out.plane_mut(s, ch).iter_mut().zip(&gp) {
                    *o *= g;
                }
            }
        }
        let rg = self.rg(x) || self.rg(gate);
        self.push(out, Op::GateMul { x, gate }, rg)
    }

    /// Reverse-mode pass seeded with `dL/d(var)` for each listed output.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(g.dims(), self.nodes[v.0].value.dims(), "backward: seed shape mismatch");
            accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0);
        }
        let mut out = Gradients::default();
        for idx in (0..=last).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(store, pid) => {
                    out.merge(Gradients {
                        by_param: BTreeMap::from([((*store, *pid), grad)]),
                    });
                }
                Op::Conv { x, w, b, k } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (dx, dw, db) = conv_backward(
                        xv,
                        wv,
                        &grad,
                        *k,
                        self.rg(*x),
                        self.rg(*w),
                        b.is_some_and(|b| self.rg(b)),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if let Some(dw) = dw {
                        accumulate(&mut grads, *w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch_stats,
                } => {
                    let xv = self.value(*x);
                    let g = self.value(*gamma).data();
                    let [n, c, h, w] = xv.dims();
                    let m = (n * h * w) as f32;
                    let mut dgamma = Tensor::zeros(self.value(*gamma).dims());
                    let mut dbeta = Tensor::zeros(self.value(*beta).dims());
                    let mut dx = Tensor::zeros(xv.dims());
                    for ch in 0..c {
                        let mut sum_dy = 0.0f64;
                        let mut sum_dy_xhat = 0.0f64;
                        for s in 0..n {
                            for (&dy, &xx) in grad.plane(s, ch).iter().zip(xv.plane(s, ch)) {
                                let xhat = (xx - mean[ch]) * inv_std[ch];
                                sum_dy += f64::from(dy);
                                sum_dy_xhat += f64::from(dy * xhat);
                            }
                        }
                        dgamma.data_mut()[ch] = sum_dy_xhat as f32;
                        dbeta.data_mut()[ch] = sum_dy as f32;
                        let k = g[ch] * inv_std[ch];
                        let (mean_dy, mean_dy_xhat) =
                            ((sum_dy / f64::from(m)) as f32, (sum_dy_xhat / f64::from(m)) as f32);
                        for s in 0..n {
                            let src = xv.plane(s, ch);
                            let dys = grad.plane(s, ch);
                            let dst = dx.plane_mut(s, ch);
                            for i in 0..src.len() {
                                dst[i] = if *batch_stats {
                                    let xhat = (src[i] - mean[ch]) * inv_std[ch];
                                    k * (dys[i] - mean_dy - xhat * mean_dy_xhat)
                                } else {
                                    k * dys[i]
                                };
                            }
                        }
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.rg(*gamma) {
                        accumulate(&mut grads, *gamma, dgamma);
                    }
                    if self.rg(*beta) {
                        accumulate(&mut grads, *beta, dbeta);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut dx = grad;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LeakyRelu(x, slope) => {
                    let xv = self.value(*x);
                    let mut dx = grad;
                    for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *d *= slope;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = grad;
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaxPool2 { x, argmax } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.dims());
                    let [n, c, _, _] = xv.dims();
                    let plane = grad.plane_len();
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            let dys = grad.plane(s, ch).to_vec();
                            let dst = dx.plane_mut(s, ch);
                            for (i, dy) in dys.iter().enumerate() {
                                dst[argmax[base + i] as usize] += dy;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::AvgPool2(x) => {
                    let xv = self.value(*x);
                    let [n, c, h, w] = xv.dims();
                    let (oh, ow) = (h / 2, w / 2);
                    let mut dx = Tensor::zeros(xv.dims());
                    for s in 0..n {
                        for ch in 0..c {
                            let dys = grad.plane(s, ch).to_vec();
                            let dst = dx.plane_mut(s, ch);
                            for y in 0..oh {
                                for xx in 0..ow {
                                    let d = 0.25 * dys[y * ow + xx];
                                    let a = (2 * y) * w + 2 * xx;
                                    dst[a] += d;
                                    dst[a + 1] += d;
                                    dst[a + w] += d;
                                    dst[a + w + 1] += d;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2(x) => {
                    let xv = self.value(*x);
                    let [n, c, h, w] = xv.dims();
                    let mut dx = Tensor::zeros(xv.dims());
                    for s in 0..n {
                        for ch in 0..c {
                            let dys = grad.plane(s, ch);
                            let mut acc = vec![0.0f32; h * w];
                            for y in 0..2 * h {
                                for xx in 0..2 * w {
                                    acc[(y / 2) * w + xx / 2] += dys[y * 2 * w + xx];
                                }
                            }
                            dx.plane_mut(s, ch).copy_from_slice(&acc);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::GlobalAvg(x) => {
                    let xv = self.value(*x);
                    let [n, c, h, w] = xv.dims();
                    let inv = 1.0 / (h * w) as f32;
                    let mut dx = Tensor::zeros(xv.dims());
                    for s in 0..n {
                        for ch in 0..c {
                            let d = grad.data()[s * c + ch] * inv;
                            dx.plane_mut(s, ch).fill(d);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).c();
                        if self.rg(p) {
                            accumulate(&mut grads, p, grad.slice_channels(offset, offset + pc));
                        }
                        offset += pc;
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, grad.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, grad);
                    }
                }
                Op::Scale(x, factor) => {
                    accumulate(&mut grads, *x, grad.map(|v| v * factor));
                }
                Op::GateMul { x, gate } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gate);
                    let [n, c, _, _] = xv.dims();
                    if self.rg(*gate) {
                        let mut dg = Tensor::zeros(gv.dims());
                        for s in 0..n {
                            let dst = dg.plane_mut(s, 0);
                            for ch in 0..c {
                                for ((d, &dy), &xx) in dst.iter_mut().zip(grad.plane(s, ch)).zip(xv.plane(s, ch)) {
                                    *d += dy * xx;
                                }
                            }
                        }
                        accumulate(&mut grads, *gate, dg);
                    }
                    if self.rg(*x) {
                        let mut dx = grad;
                        for s in 0..n {
                            let gp = gv.plane(s, 0).to_vec();
                            for ch in 0..c {
                                for (d, g) in dx.plane_mut(s, ch).iter_mut().zip(&gp) {
                                    *d *= g;
                                }
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Output pixels per GEMM tile; keeps the im2col tile cache-resident.
const TILE_PIXELS: usize = 512;

/// im2col restricted to output rows `y0..y1`:
/// `cols[(ci*k + ky)*k + kx, (y-y0)*w + x] = x[ci, y+ky-p, x+kx-p]` (zero padded).
#[allow(clippy::too_many_arguments)]
fn im2col_rows(sample: &[f32], c: usize, h: usize, w: usize, k: usize, y0: usize, y1: usize, cols: &mut [f32]) {
    let pad = k / 2;
    let hw = h * w;
    let tn = (y1 - y0) * w;
    for ci in 0..c {
        let src = &sample[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * tn;
                let dst = &mut cols[row..row + tn];
                let shift = kx as isize - pad as isize;
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - pad as isize;
                    let drow = &mut dst[(y - y0) * w..(y - y0 + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    // valid x range: 0 <= x + shift < w
                    let lo = (-shift).max(0) as usize;
                    let hi = (w as isize - shift).min(w as isize).max(0) as usize;
                    drow[..lo.min(w)].fill(0.0);
                    if hi > lo {
                        let s0 = (lo as isize + shift) as usize;
                        drow[lo..hi].copy_from_slice(&srow[s0..s0 + (hi - lo)]);
                    }
                    drow[hi.max(lo)..].fill(0.0);
                }
            }
        }
    }
}

/// Strided `c = a * b + beta * c` via `matrixmultiply`; `(rs, cs)` are the
/// row and column strides of each operand.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    let extent = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= extent(m, k, rsa, csa));
    assert!(b.len() >= extent(k, n, rsb, csb));
    assert!(c.len() >= extent(m, n, rsc, 1));
    // SAFETY: the asserts above bound every strided access.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Row bands `(y0, y1)` covering `h` rows with about [`TILE_PIXELS`] pixels each.
fn row_tiles(h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let rows = (TILE_PIXELS / w.max(1)).max(1);
    (0..h).step_by(rows).map(move |y0| (y0, (y0 + rows).min(h)))
}

pub(crate) fn conv_forward(x: &Tensor, w: &Tensor, bias: Option<&[f32]>) -> Tensor {
    let [n, cin, h, wd] = x.dims();
    let [cout, _, k, _] = w.dims();
    let hw = h * wd;
    let ckk = cin * k * k;
    let mut out = Tensor::zeros([n, cout, h, wd]);
    let rows = (TILE_PIXELS / wd).max(1);
    let mut cols = if k == 1 {
        Vec::new()
    } else {
        vec![0.0f32; ckk * rows * wd]
    };
    for s in 0..n {
        let src = x.sample(s);
        let dst = out.sample_mut(s);
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(hw).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        for (y0, y1) in row_tiles(h, wd) {
            let tn = (y1 - y0) * wd;
            let off = y0 * wd;
            if k == 1 {
                gemm(
                    cout,
                    cin,
                    tn,
                    w.data(),
                    (cin, 1),
                    &src[off..],
                    (hw, 1),
                    beta,
                    &mut dst[off..],
                    hw,
                );
            } else {
                im2col_rows(src, cin, h, wd, k, y0, y1, &mut cols);
                gemm(
                    cout,
                    ckk,
                    tn,
                    w.data(),
                    (ckk, 1),
                    &cols,
                    (tn, 1),
                    beta,
                    &mut dst[off..],
                    hw,
                );
            }
        }
    }
    out
}

type ConvGrads = (Option<Tensor>, Option<Tensor>, Option<Tensor>);

/// Kernel flipped in space with in/out channels swapped:
/// `f[ci, (co*k + ky)*k + kx] = w[co, ci, k-1-ky, k-1-kx]`.
fn flip_kernel(w: &Tensor) -> Vec<f32> {
    let [cout, cin, k, _] = w.dims();
    let mut f = vec![0.0; cin * cout * k * k];
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    f[ci * cout * k * k + (co * k + ky) * k + kx] =
                        w.data()[((co * cin + ci) * k + (k - 1 - ky)) * k + (k - 1 - kx)];
                }
            }
        }
    }
    f
}

fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    k: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads {
    let [n, cin, h, wd] = x.dims();
    let cout = w.dims()[0];
    let hw = h * wd;
    let ckk = cin * k * k;
    let okk = cout * k * k;
    let rows = (TILE_PIXELS / wd).max(1);
    let mut dx = need_dx.then(|| Tensor::zeros(x.dims()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.dims()));
    let mut db = need_db.then(|| Tensor::zeros([1, cout, 1, 1]));
    let mut cols = if need_dw && k != 1 {
        vec![0.0f32; ckk * rows * wd]
    } else {
        Vec::new()
    };
    let mut dcols = if need_dx && k != 1 {
        vec![0.0f32; okk * rows * wd]
    } else {
        Vec::new()
    };
    let flipped = if need_dx && k != 1 { flip_kernel(w) } else { Vec::new() };
    for s in 0..n {
        let dys = dy.sample(s);
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dys.chunks(hw).enumerate() {
                db.data_mut()[co] += chunk.iter().sum::<f32>();
            }
        }
        for (y0, y1) in row_tiles(h, wd) {
            let tn = (y1 - y0) * wd;
            let off = y0 * wd;
            if let Some(dw) = dw.as_mut() {
                // dW[cout, ckk] += dY[cout, tile] * cols[ckk, tile]^T
                if k == 1 {
                    let xs = &x.sample(s)[off..];
                    gemm(
                        cout,
                        tn,
                        cin,
                        &dys[off..],
                        (hw, 1),
                        xs,
                        (1, hw),
                        1.0,
                        dw.data_mut(),
                        cin,
                    );
                } else {
                    im2col_rows(x.sample(s), cin, h, wd, k, y0, y1, &mut cols);
                    gemm(
                        cout,
                        tn,
                        ckk,
                        &dys[off..],
                        (hw, 1),
                        &cols,
                        (1, tn),
                        1.0,
                        dw.data_mut(),
                        ckk,
                    );
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx.sample_mut(s)[off..];
                if k == 1 {
                    // dX[cin, tile] = W^T[cin, cout] * dY[cout, tile]
                    gemm(cin, cout, tn, w.data(), (1, cin), &dys[off..], (hw, 1), 0.0, dst, hw);
                } else {
                    // full correlation of dY with the flipped kernel
                    im2col_rows(dys, cout, h, wd, k, y0, y1, &mut dcols);
                    gemm(cin, okk, tn, &flipped, (okk, 1), &dcols, (tn, 1), 0.0, dst, hw);
                }
            }
        }
    }
    (dx, dw, db)
}
