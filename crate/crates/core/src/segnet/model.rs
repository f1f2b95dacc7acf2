use serde::{Deserialize, Serialize};

use super::SegError;
use crate::nn::layers::{Conv, ConvNormAct, DenseBlock, Transition};
use crate::nn::{Graph, Mode, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegVariant {
    Plain,
    Multiclass,
    Attention,
    Dense,
}

impl std::str::FromStr for SegVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain" => Ok(Self::Plain),
            "multiclass" => Ok(Self::Multiclass),
            "attention" => Ok(Self::Attention),
            "dense" => Ok(Self::Dense),
            other => Err(format!("unknown segmentation variant {other:?}")),
        }
    }
}

fn default_growth() -> usize {
    8
}
fn default_dense_layers() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegModelConfig {
    pub variant: SegVariant,
    pub depth: usize,
    pub base_channels: usize,
    #[serde(default = "default_growth")]
    pub growth_rate: usize,
    /// Layers per dense block (dense variant).
    #[serde(default = "default_dense_layers")]
    pub dense_layers: usize,
    pub input_size: usize,
    pub out_channels: usize,
}

impl SegModelConfig {
    pub fn new(variant: SegVariant, depth: usize, base_channels: usize, input_size: usize) -> Self {
        Self {
            variant,
            depth,
            base_channels,
            growth_rate: default_growth(),
            dense_layers: default_dense_layers(),
            input_size,
            out_channels: if variant == SegVariant::Multiclass { 6 } else { 1 },
        }
    }

    pub fn with_out_channels(mut self, out_channels: usize) -> Self {
        self.out_channels = out_channels;
        self
    }

    /// Checks the shape contract. The dense variant may carry either one
    /// output channel or six, because it also serves as the six-lesion
    /// source network of the transfer module.
    pub fn validate(&self) -> Result<(), SegError> {
        let bad = |m: String| Err(SegError::InvalidConfig(m));
        if self.depth == 0 || self.depth > 6 {
            return bad(format!("depth {} outside 1..=6", self.depth));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        let stride = 1usize << self.depth;
        if self.input_size == 0 || self.input_size % stride != 0 {
            return bad(format!(
                "input_size {} is not divisible by 2^depth = {stride}",
                self.input_size
            ));
        }
        let ok = match self.variant {
            SegVariant::Multiclass => self.out_channels == 6,
            SegVariant::Plain | SegVariant::Attention => self.out_channels == 1,
            SegVariant::Dense => matches!(self.out_channels, 1 | 6),
        };
        if !ok {
            return bad(format!(
                "{:?} variant cannot have {} output channels",
                self.variant, self.out_channels
            ));
        }
        if self.variant == SegVariant::Dense && (self.growth_rate == 0 || self.dense_layers == 0) {
            return bad("dense variant needs growth_rate and dense_layers > 0".into());
        }
        Ok(())
    }

    fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }
}

/// Additive attention gate on a skip connection. The attention field is
/// `sigmoid(psi(relu(theta(skip) + up(phi(gating)))))`, one value per pixel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionGate {
    pub theta: Conv,
    pub phi: Conv,
    pub psi: Conv,
}

impl AttentionGate {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, skip_c: usize, gate_c: usize) -> Self {
        let inter = (skip_c / 2).max(1);
        Self {
            theta: Conv::new(store, seed, &format!("{name}.theta"), skip_c, inter, 1, false),
            phi: Conv::new(store, seed, &format!("{name}.phi"), gate_c, inter, 1, true),
            psi: Conv::new(store, seed, &format!("{name}.psi"), inter, 1, 1, true),
        }
    }

    /// Attention field `[n, 1, h, w]` in `[0, 1]`.
    pub fn field(&self, g: &mut Graph, store: &ParamStore, skip: Var, gating: Var) -> Result<Var, SegError> {
        let [sn, _, sh, sw] = g.value(skip).dims();
        let [gn, _, gh, gw] = g.value(gating).dims();
        if sn != gn || sh != 2 * gh || sw != 2 * gw {
            return Err(SegError::ShapeMismatch(format!(
                "gating map {gh}x{gw} must be half of skip map {sh}x{sw} with equal batch"
            )));
        }
        let t = self.theta.forward(g, store, skip);
        let p = self.phi.forward(g, store, gating);
        let p = g.upsample2(p);
        let a = g.add(t, p);
        let a = g.relu(a);
        let a = self.psi.forward(g, store, a);
        Ok(g.sigmoid(a))
    }

    /// Skip features multiplied by the attention field.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, skip: Var, gating: Var) -> Result<Var, SegError> {
        let field = self.field(g, store, skip, gating)?;
        Ok(g.gate_mul(skip, field))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct UNet {
    enc: Vec<[ConvNormAct; 2]>,
    bottleneck: [ConvNormAct; 2],
    up: Vec<ConvNormAct>,
    gates: Vec<Option<AttentionGate>>,
    dec: Vec<[ConvNormAct; 2]>,
}

impl UNet {
    fn new(store: &mut ParamStore, seed: u64, cfg: &SegModelConfig) -> Self {
        let c = |s| cfg.stage_channels(s);
        let mut enc = Vec::new();
        let mut in_c = 3;
        for s in 0..cfg.depth {
            enc.push([
                ConvNormAct::new(store, seed, &format!("enc{s}.a"), in_c, c(s)),
                ConvNormAct::new(store, seed, &format!("enc{s}.b"), c(s), c(s)),
            ]);
            in_c = c(s);
        }
        let d = cfg.depth;
        let bottleneck = [
            ConvNormAct::new(store, seed, "mid.a", c(d - 1), c(d)),
            ConvNormAct::new(store, seed, "mid.b", c(d), c(d)),
        ];
        let mut up = Vec::new();
        let mut gates = Vec::new();
        let mut dec = Vec::new();
        for s in 0..d {
            up.push(ConvNormAct::new(store, seed, &format!("up{s}"), c(s + 1), c(s)));
            gates.push(
                (cfg.variant == SegVariant::Attention)
                    .then(|| AttentionGate::new(store, seed, &format!("gate{s}"), c(s), c(s + 1))),
            );
            dec.push([
                ConvNormAct::new(store, seed, &format!("dec{s}.a"), 2 * c(s), c(s)),
                ConvNormAct::new(store, seed, &format!("dec{s}.b"), c(s), c(s)),
            ]);
        }
        Self {
            enc,
            bottleneck,
            up,
            gates,
            dec,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<(Var, Vec<Var>, Var), SegError> {
        let mut skips = Vec::new();
        let mut h = x;
        for [a, b] in &self.enc {
            h = a.forward(g, store, h, mode);
            h = b.forward(g, store, h, mode);
            skips.push(h);
            h = g.max_pool2(h);
        }
        h = self.bottleneck[0].forward(g, store, h, mode);
        h = self.bottleneck[1].forward(g, store, h, mode);
        let bottleneck = h;
        for s in (0..self.dec.len()).rev() {
            let coarse = h;
            let up = g.upsample2(h);
            let up = self.up[s].forward(g, store, up, mode);
            let skip = match &self.gates[s] {
                Some(gate) => gate.forward(g, store, skips[s], coarse)?,
                None => skips[s],
            };
            let cat = g.concat(&[skip, up]);
            h = self.dec[s][0].forward(g, store, cat, mode);
            h = self.dec[s][1].forward(g, store, h, mode);
        }
        Ok((h, skips, bottleneck))
    }
}

/// Densely connected encoder: a stem convolution, `depth` dense blocks each
/// followed by a pooling transition, then a bottleneck dense block and one
/// more (non-pooling) transition layer.
///
/// `extra[s]` channels may be concatenated onto the block output at scale
/// `s` before its transition; the transfer module uses this to inject
/// features from another network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseEncoder {
    pub stem: Conv,
    pub blocks: Vec<DenseBlock>,
    pub transitions: Vec<Transition>,
    pub bottleneck_block: DenseBlock,
    pub bottleneck_transition: Transition,
}

/// Outputs of [`DenseEncoder::forward`].
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Dense-block outputs at scales `0..depth` (before any injection).
    pub scales: Vec<Var>,
    /// Bottleneck map at scale `depth`.
    pub bottleneck: Var,
}

impl DenseEncoder {
    pub fn new(
        store: &mut ParamStore,
        seed: u64,
        name: &str,
        in_c: usize,
        cfg: &SegModelConfig,
        extra: &[usize],
    ) -> Self {
        let mut c = cfg.base_channels;
        let stem = Conv::new(store, seed, &format!("{name}.stem"), in_c, c, 3, false);
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for s in 0..cfg.depth {
            let block = DenseBlock::new(
                store,
                seed,
                &format!("{name}.block{s}"),
                c,
                cfg.growth_rate,
                cfg.dense_layers,
            );
            let out = block.out_channels();
            let inject = extra.get(s).copied().unwrap_or(0);
            let compressed = out.div_ceil(2);
            transitions.push(Transition::new(
                store,
                seed,
                &format!("{name}.trans{s}"),
                out + inject,
                compressed,
                true,
            ));
            blocks.push(block);
            c = compressed;
        }
        let bottleneck_block = DenseBlock::new(
            store,
            seed,
            &format!("{name}.block{}", cfg.depth),
            c,
            cfg.growth_rate,
            cfg.dense_layers,
        );
        let bottleneck_transition = Transition::new(
            store,
            seed,
            &format!("{name}.trans{}", cfg.depth),
            bottleneck_block.out_channels(),
            cfg.stage_channels(cfg.depth),
            false,
        );
        Self {
            stem,
            blocks,
            transitions,
            bottleneck_block,
            bottleneck_transition,
        }
    }

    /// Channel count of the block output at each scale.
    pub fn scale_channels(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.out_channels()).collect()
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.bottleneck_transition.out_channels()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        inject: Option<&[Var]>,
    ) -> EncoderOutput {
        let mut h = self.stem.forward(g, store, x);
        let mut scales = Vec::new();
        for (s, (block, trans)) in self.blocks.iter().zip(&self.transitions).enumerate() {
            let out = block.forward(g, store, h, mode);
            scales.push(out);
            let merged = match inject.and_then(|v| v.get(s)) {
                Some(&extra) => g.concat(&[out, extra]),
                None => out,
            };
            h = trans.forward(g, store, merged, mode);
        }
        let b = self.bottleneck_block.forward(g, store, h, mode);
        let bottleneck = self.bottleneck_transition.forward(g, store, b, mode);
        EncoderOutput { scales, bottleneck }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DenseUNet {
    encoder: DenseEncoder,
    up: Vec<ConvNormAct>,
    dec: Vec<ConvNormAct>,
}

impl DenseUNet {
    fn new(store: &mut ParamStore, seed: u64, cfg: &SegModelConfig) -> Self {
        let encoder = DenseEncoder::new(store, seed, "enc", 3, cfg, &[]);
        let skip_c = encoder.scale_channels();
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for s in 0..cfg.depth {
            let from = if s + 1 == cfg.depth {
                encoder.bottleneck_channels()
            } else {
                cfg.stage_channels(s + 1)
            };
            let d = cfg.stage_channels(s);
            up.push(ConvNormAct::new(store, seed, &format!("up{s}"), from, d));
            dec.push(ConvNormAct::new(store, seed, &format!("dec{s}"), skip_c[s] + d, d));
        }
        Self { encoder, up, dec }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> (Var, Vec<Var>, Var) {
        let enc = self.encoder.forward(g, store, x, mode, None);
        let mut h = enc.bottleneck;
        for s in (0..self.dec.len()).rev() {
            let up = g.upsample2(h);
            let up = self.up[s].forward(g, store, up, mode);
            let cat = g.concat(&[enc.scales[s], up]);
            h = self.dec[s].forward(g, store, cat, mode);
        }
        (h, enc.scales, enc.bottleneck)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Arch {
    UNet(UNet),
    Dense(DenseUNet),
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct SegOutput {
    /// Pre-sigmoid logits `[n, out_channels, h, w]`.
    pub logits: Var,
    /// Encoder feature maps at scales `0..depth`, finest first.
    pub pyramid: Vec<Var>,
    /// Bottleneck map at scale `depth`.
    pub bottleneck: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegModel {
    pub config: SegModelConfig,
    pub seed: u64,
    pub store: ParamStore,
    arch: Arch,
    head: Conv,
}

impl SegModel {
    pub fn config(&self) -> &SegModelConfig {
        &self.config
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<SegOutput, SegError> {
        let [_, c, h, w] = g.value(x).dims();
        let size = self.config.input_size;
        if c != 3 || h != size || w != size {
            return Err(SegError::ShapeMismatch(format!(
                "model expects [n, 3, {size}, {size}] input, got [n, {c}, {h}, {w}]"
            )));
        }
        let (features, pyramid, bottleneck) = match &self.arch {
            Arch::UNet(net) => net.forward(g, &self.store, x, mode)?,
            Arch::Dense(net) => net.forward(g, &self.store, x, mode),
        };
        let logits = self.head.forward(g, &self.store, features);
        Ok(SegOutput {
            logits,
            pyramid,
            bottleneck,
        })
    }

    /// Channel count of each pyramid level.
    pub fn pyramid_channels(&self) -> Vec<usize> {
        match &self.arch {
            Arch::UNet(_) => (0..self.config.depth).map(|s| self.config.stage_channels(s)).collect(),
            Arch::Dense(net) => net.encoder.scale_channels(),
        }
    }

    pub fn bottleneck_channels(&self) -> usize {
        match &self.arch {
            Arch::UNet(_) => self.config.stage_channels(self.config.depth),
            Arch::Dense(net) => net.encoder.bottleneck_channels(),
        }
    }

    /// Sigmoid probabilities for `images` `[n, 3, s, s]`, evaluated in
    /// inference mode in chunks of `chunk` samples.
    pub fn predict(&self, images: &Tensor, chunk: usize) -> Result<Tensor, SegError> {
        let n = images.n();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let mut g = Graph::new();
            g.freeze(self.store.id());
            let x = g.input(images.slice_batch(start, end));
            let out = self.forward(&mut g, x, Mode::Eval)?;
            parts.push(g.value(out.logits).map(crate::nn::graph::sigmoid));
            start = end;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::stack(&refs))
    }
}

/// Build a segmentation network with initial parameters drawn from `seed`.
pub fn build_segmentation_model(config: &SegModelConfig, seed: u64) -> Result<SegModel, SegError> {
    config.validate()?;
    let mut store = ParamStore::new("seg");
    let arch = match config.variant {
        SegVariant::Dense => Arch::Dense(DenseUNet::new(&mut store, seed, config)),
        _ => Arch::UNet(UNet::new(&mut store, seed, config)),
    };
    let head = Conv::new(
        &mut store,
        seed,
        "head",
        config.base_channels,
        config.out_channels,
        1,
        true,
    );
    Ok(SegModel {
        config: config.clone(),
        seed,
        store,
        arch,
        head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(n: usize, size: usize) -> Tensor {
        let len = n * 3 * size * size;
        Tensor::from_vec(
            [n, 3, size, size],
            (0..len).map(|i| ((i * 37) % 101) as f32 / 101.0).collect(),
        )
    }

    #[test]
    fn output_shapes_for_every_variant() {
        for variant in [
            SegVariant::Plain,
            SegVariant::Multiclass,
            SegVariant::Attention,
            SegVariant::Dense,
        ] {
            let cfg = SegModelConfig::new(variant, 2, 4, 16);
            let model = build_segmentation_model(&cfg, 1).unwrap();
            let p = model.predict(&image(2, 16), 8).unwrap();
            assert_eq!(p.dims(), [2, cfg.out_channels, 16, 16], "{variant:?}");
            assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn plain_depth2_base8_input64() {
        let cfg = SegModelConfig::new(SegVariant::Plain, 2, 8, 64);
        let model = build_segmentation_model(&cfg, 3).unwrap();
        assert_eq!(model.predict(&image(1, 64), 1).unwrap().dims(), [1, 1, 64, 64]);
        let multi = SegModelConfig::new(SegVariant::Multiclass, 2, 8, 64);
        let model = build_segmentation_model(&multi, 3).unwrap();
        assert_eq!(model.predict(&image(1, 64), 1).unwrap().dims(), [1, 6, 64, 64]);
    }

    #[test]
    fn deterministic_initialisation() {
        let cfg = SegModelConfig::new(SegVariant::Attention, 2, 4, 16);
        let a = build_segmentation_model(&cfg, 9).unwrap();
        let b = build_segmentation_model(&cfg, 9).unwrap();
        let c = build_segmentation_model(&cfg, 10).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(a.store.num_params(), b.store.num_params());
        assert_ne!(a.store.checksum(), c.store.checksum());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = SegModelConfig::new(SegVariant::Plain, 3, 4, 20);
        assert!(build_segmentation_model(&cfg, 0).is_err());
        cfg.input_size = 24;
        cfg.out_channels = 6;
        assert!(build_segmentation_model(&cfg, 0).is_err());
        let dense6 = SegModelConfig::new(SegVariant::Dense, 2, 4, 16).with_out_channels(6);
        assert!(build_segmentation_model(&dense6, 0).is_ok());
    }

    #[test]
    fn dense_pyramid_halves_per_scale() {
        let cfg = SegModelConfig::new(SegVariant::Dense, 3, 4, 32).with_out_channels(6);
        let model = build_segmentation_model(&cfg, 2).unwrap();
        let mut g = Graph::new();
        let x = g.input(image(1, 32));
        let out = model.forward(&mut g, x, Mode::Eval).unwrap();
        assert_eq!(out.pyramid.len(), 3);
        for (s, &v) in out.pyramid.iter().enumerate() {
            let d = g.value(v).dims();
            assert_eq!((d[2], d[3]), (32 >> s, 32 >> s));
            assert_eq!(d[1], model.pyramid_channels()[s]);
        }
        assert_eq!(g.value(out.bottleneck).dims(), [1, model.bottleneck_channels(), 4, 4]);
    }

    fn gate_fixture(bias: f32) -> (Graph, ParamStore, AttentionGate, Var, Var) {
        let mut store = ParamStore::new("t");
        let gate = AttentionGate::new(&mut store, 1, "g", 3, 4);
        if bias != 0.0 {
            store.value_mut(gate.psi.weight).data_mut().fill(0.0);
            store.value_mut(gate.psi.bias.unwrap()).data_mut().fill(bias);
        }
        let mut g = Graph::new();
        let skip = g.input(Tensor::from_vec(
            [2, 3, 4, 4],
            (0..96).map(|i| (i as f32 * 0.37).sin() * 3.0).collect(),
        ));
        let gating = g.input(Tensor::from_vec(
            [2, 4, 2, 2],
            (0..32).map(|i| (i as f32 * 0.91).cos()).collect(),
        ));
        (g, store, gate, skip, gating)
    }

    #[test]
    fn attention_gate_identity_and_zero() {
        let (mut g, store, gate, skip, gating) = gate_fixture(1.0e4);
        let out = gate.forward(&mut g, &store, skip, gating).unwrap();
        assert_eq!(g.value(out), g.value(skip));
        let (mut g, store, gate, skip, gating) = gate_fixture(-1.0e4);
        let out = gate.forward(&mut g, &store, skip, gating).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_gate_bounded_by_skip() {
        let (mut g, store, gate, skip, gating) = gate_fixture(0.0);
        let out = gate.forward(&mut g, &store, skip, gating).unwrap();
        for (o, s) in g.value(out).data().iter().zip(g.value(skip).data()) {
            assert!(o.abs() <= s.abs());
        }
        let bad = g.input(Tensor::zeros([2, 4, 3, 3]));
        assert!(matches!(
            gate.forward(&mut g, &store, skip, bad),
            Err(SegError::ShapeMismatch(_))
        ));
    }
}
