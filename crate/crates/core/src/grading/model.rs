use serde::{Deserialize, Serialize};

use super::GradeError;
use crate::data::{Dataset, NUM_GRADES};
use crate::nn::layers::{Conv, ConvNormAct};
use crate::nn::tensor::resize_bilinear;
use crate::nn::{Graph, Mode, ParamStore, Tensor, Var};
use crate::segnet::{DenseEncoder, SegModel, SegModelConfig, SegVariant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    SmallCnn,
    DenseBackbone,
}

impl std::str::FromStr for Backbone {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small-cnn" => Ok(Self::SmallCnn),
            "dense-backbone" => Ok(Self::DenseBackbone),
            other => Err(format!("unknown backbone {other:?}")),
        }
    }
}

/// How lesion predictions of a frozen segmentation network reach the
/// classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    None,
    /// Six probability maps appended to the RGB input.
    LesionMaskConcat,
    /// Pooled segmentation bottleneck appended to the pooled classifier
    /// features.
    LesionFeatureConcat,
}

impl std::str::FromStr for Fusion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "lesion-mask-concat" => Ok(Self::LesionMaskConcat),
            "lesion-feature-concat" => Ok(Self::LesionFeatureConcat),
            other => Err(format!("unknown fusion {other:?}")),
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
pub struct GradeModelConfig {
    pub backbone: Backbone,
    pub num_stages: usize,
    pub base_channels: usize,
    pub fusion: Fusion,
    /// Laser-mark and proliferate-membrane heads.
    pub aux_heads: bool,
    pub input_size: usize,
    #[serde(default = "default_growth")]
    pub growth_rate: usize,
    #[serde(default = "default_dense_layers")]
    pub dense_layers: usize,
}

impl GradeModelConfig {
    pub fn new(backbone: Backbone, num_stages: usize, base_channels: usize, input_size: usize) -> Self {
        Self {
            backbone,
            num_stages,
            base_channels,
            fusion: Fusion::None,
            aux_heads: false,
            input_size,
            growth_rate: default_growth(),
            dense_layers: default_dense_layers(),
        }
    }

    pub fn with_fusion(mut self, fusion: Fusion) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn with_aux_heads(mut self, aux: bool) -> Self {
        self.aux_heads = aux;
        self
    }

    pub fn validate(&self) -> Result<(), GradeError> {
        let bad = |m: String| Err(GradeError::InvalidConfig(m));
        if self.num_stages == 0 || self.num_stages > 6 {
            return bad(format!("num_stages {} outside 1..=6", self.num_stages));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        let stride = 1usize << self.num_stages;
        if self.input_size == 0 || self.input_size % stride != 0 {
            return bad(format!(
                "input_size {} is not divisible by 2^num_stages = {stride}",
                self.input_size
            ));
        }
        if self.backbone == Backbone::DenseBackbone && (self.growth_rate == 0 || self.dense_layers == 0) {
            return bad("dense backbone needs growth_rate and dense_layers > 0".into());
        }
        Ok(())
    }

    /// Channels entering the encoder.
    pub fn input_channels(&self) -> usize {
        match self.fusion {
            Fusion::LesionMaskConcat => 3 + 6,
            _ => 3,
        }
    }

    fn dense_config(&self) -> SegModelConfig {
        SegModelConfig {
            variant: SegVariant::Dense,
            depth: self.num_stages,
            base_channels: self.base_channels,
            growth_rate: self.growth_rate,
            dense_layers: self.dense_layers,
            input_size: self.input_size,
            out_channels: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Encoder {
    /// Conv-norm-relu then 2x max pooling per stage.
    Small(Vec<ConvNormAct>),
    Dense(DenseEncoder),
}

impl Encoder {
    fn out_channels(&self) -> usize {
        match self {
            Encoder::Small(stages) => stages.last().map_or(0, |s| s.conv.out_c),
            Encoder::Dense(enc) => enc.bottleneck_channels(),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Var {
        match self {
            Encoder::Small(stages) => {
                let mut h = x;
                for stage in stages {
                    h = stage.forward(g, store, h, mode);
                    h = g.max_pool2(h);
                }
                h
            }
            Encoder::Dense(enc) => enc.forward(g, store, x, mode, None).bottleneck,
        }
    }
}

/// Classifier inputs after fusion.
#[derive(Clone, Debug)]
pub struct FusedInputs {
    /// `[n, 3 or 9, s, s]`.
    pub images: Tensor,
    /// Pooled segmentation features `[n, c, 1, 1]` for feature fusion.
    pub seg_features: Option<Tensor>,
}

impl FusedInputs {
    pub fn len(&self) -> usize {
        self.images.n()
    }

    pub fn is_empty(&self) -> bool {
        self.images.n() == 0
    }

    pub fn gather(&self, idx: &[usize]) -> FusedInputs {
        FusedInputs {
            images: crate::segnet::gather(&self.images, idx),
            seg_features: self.seg_features.as_ref().map(|t| crate::segnet::gather(t, idx)),
        }
    }
}

const CHUNK: usize = 8;

fn resized(images: &Tensor, size: usize) -> Tensor {
    if images.h() == size && images.w() == size {
        images.clone()
    } else {
        resize_bilinear(images, size, size)
    }
}

/// Pooled bottleneck features of a frozen segmentation network.
fn seg_pooled_features(seg: &SegModel, images: &Tensor) -> Result<Tensor, GradeError> {
    let mut parts = Vec::new();
    let mut start = 0;
    while start < images.n() {
        let end = (start + CHUNK).min(images.n());
        let mut g = Graph::new();
        g.freeze(seg.store.id());
        let x = g.input(images.slice_batch(start, end));
        let out = seg.forward(&mut g, x, Mode::Eval)?;
        let pooled = g.global_avg_pool(out.bottleneck);
        parts.push(g.value(pooled).clone());
        start = end;
    }
    Ok(Tensor::stack(&parts.iter().collect::<Vec<_>>()))
}

/// Runs the frozen `seg` network on `images` `[n, 3, h, w]` and builds the
/// classifier input at `out_size`. Probability maps are resized
/// bilinearly when the two networks differ in resolution.
pub fn fuse_lesion_inputs(
    images: &Tensor,
    seg: Option<&SegModel>,
    fusion: Fusion,
    out_size: usize,
) -> Result<FusedInputs, GradeError> {
    let base = resized(images, out_size);
    let seg = match (fusion, seg) {
        (Fusion::None, _) => {
            return Ok(FusedInputs {
                images: base,
                seg_features: None,
            })
        }
        (_, Some(seg)) => seg,
        (_, None) => {
            return Err(GradeError::InvalidConfig(
                "lesion fusion needs a segmentation model".into(),
            ))
        }
    };
    let seg_in = resized(images, seg.config.input_size);
    match fusion {
        Fusion::LesionMaskConcat => {
            let probs = resized(&seg.predict(&seg_in, CHUNK)?, out_size);
            let n = images.n();
            let plane = out_size * out_size;
            let mut data = Vec::with_capacity(n * 9 * plane);
            for s in 0..n {
                data.extend_from_slice(base.sample(s));
                data.extend_from_slice(probs.sample(s));
            }
            Ok(FusedInputs {
                images: Tensor::from_vec([n, 9, out_size, out_size], data),
                seg_features: None,
            })
        }
        Fusion::LesionFeatureConcat => Ok(FusedInputs {
            images: base,
            seg_features: Some(seg_pooled_features(seg, &seg_in)?),
        }),
        Fusion::None => unreachable!("handled above"),
    }
}

/// Outputs of one classifier forward pass.
#[derive(Clone, Debug)]
pub struct GradeOutput {
    /// `[n, 5, 1, 1]`.
    pub logits: Var,
    /// `[n, 2, 1, 1]` laser-mark / membrane logits.
    pub aux: Option<Var>,
    /// Final encoder maps, before pooling.
    pub features: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradePrediction {
    pub logits: [f64; NUM_GRADES],
    pub grade: u8,
    /// Sigmoid laser-mark and membrane probabilities.
    pub aux: Option<[f64; 2]>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_grade(logits: &[f64]) -> u8 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u8
}

impl GradePrediction {
    pub fn from_logits(logits: [f64; NUM_GRADES], aux: Option<[f64; 2]>) -> Self {
        Self {
            grade: argmax_grade(&logits),
            logits,
            aux,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeModel {
    pub config: GradeModelConfig,
    pub seed: u64,
    pub store: ParamStore,
    encoder: Encoder,
    pub(crate) head: Conv,
    pub(crate) aux: Option<Conv>,
    /// Frozen lesion network used by fusion.
    pub seg: Option<SegModel>,
}

/// Classifier with a global-average-pooling head. `seg` is required when
/// the config asks for fusion and is kept frozen.
pub fn build_grading_model(
    config: &GradeModelConfig,
    seed: u64,
    seg: Option<SegModel>,
) -> Result<GradeModel, GradeError> {
    config.validate()?;
    let seg = match (config.fusion, seg) {
        (Fusion::None, _) => None,
        (_, None) => {
            return Err(GradeError::InvalidConfig(format!(
                "{:?} fusion needs a trained segmentation model",
                config.fusion
            )))
        }
        (Fusion::LesionMaskConcat, Some(s)) if s.config.out_channels != 6 => {
            return Err(GradeError::InvalidConfig(format!(
                "mask fusion needs a six-channel segmentation model, got {}",
                s.config.out_channels
            )))
        }
        (_, Some(s)) => Some(s),
    };
    let mut store = ParamStore::new("grade");
    let in_c = config.input_channels();
    let encoder = match config.backbone {
        Backbone::SmallCnn => Encoder::Small(
            (0..config.num_stages)
                .map(|s| {
                    let from = if s == 0 { in_c } else { config.base_channels << (s - 1) };
                    ConvNormAct::new(&mut store, seed, &format!("stage{s}"), from, config.base_channels << s)
                })
                .collect(),
        ),
        Backbone::DenseBackbone => Encoder::Dense(DenseEncoder::new(
            &mut store,
            seed,
            "enc",
            in_c,
            &config.dense_config(),
            &[],
        )),
    };
    let seg_c = match (&seg, config.fusion) {
        (Some(s), Fusion::LesionFeatureConcat) => s.bottleneck_channels(),
        _ => 0,
    };
    let pooled = encoder.out_channels() + seg_c;
    let head = Conv::new(&mut store, seed, "head", pooled, NUM_GRADES, 1, true);
    let aux = config
        .aux_heads
        .then(|| Conv::new(&mut store, seed, "aux", pooled, 2, 1, true));
    Ok(GradeModel {
        config: config.clone(),
        seed,
        store,
        encoder,
        head,
        aux,
        seg,
    })
}

impl GradeModel {
    /// Channels of the final encoder maps (CAM features).
    pub fn feature_channels(&self) -> usize {
        self.encoder.out_channels()
    }

    /// Length of the pooled vector fed to the heads.
    pub fn pooled_channels(&self) -> usize {
        self.head.in_c
    }

    /// Forward on fused inputs already on the tape.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        seg_features: Option<Var>,
        mode: Mode,
    ) -> Result<GradeOutput, GradeError> {
        let [_, c, h, w] = g.value(x).dims();
        let size = self.config.input_size;
        if c != self.config.input_channels() || h != size || w != size {
            return Err(GradeError::ShapeMismatch(format!(
                "classifier expects [n, {}, {size}, {size}], got [n, {c}, {h}, {w}]",
                self.config.input_channels()
            )));
        }
        let features = self.encoder.forward(g, &self.store, x, mode);
        let mut pooled = g.global_avg_pool(features);
        if self.config.fusion == Fusion::LesionFeatureConcat {
            let sf = seg_features
                .ok_or_else(|| GradeError::ShapeMismatch("feature fusion needs segmentation features".into()))?;
            pooled = g.concat(&[pooled, sf]);
        }
        let logits = self.head.forward(g, &self.store, pooled);
        let aux = self.aux.as_ref().map(|a| a.forward(g, &self.store, pooled));
        Ok(GradeOutput { logits, aux, features })
    }

    /// Classifier inputs for every sample of `dataset`.
    pub fn prepare(&self, dataset: &Dataset) -> Result<FusedInputs, GradeError> {
        let idx: Vec<usize> = (0..dataset.len()).collect();
        if idx.is_empty() {
            return Err(GradeError::Data(crate::data::DataError::EmptyDataset));
        }
        let images = dataset.image_tensor(&idx);
        fuse_lesion_inputs(&images, self.seg.as_ref(), self.config.fusion, self.config.input_size)
    }

    /// Raw outputs `(logits [n,5], aux [n,2])` in inference mode.
    pub(crate) fn raw_outputs(&self, inputs: &FusedInputs) -> Result<(Tensor, Option<Tensor>), GradeError> {
        let mut logits = Vec::new();
        let mut aux = Vec::new();
        let mut start = 0;
        while start < inputs.len() {
            let end = (start + CHUNK).min(inputs.len());
            let idx: Vec<usize> = (start..end).collect();
            let batch = inputs.gather(&idx);
            let mut g = Graph::new();
            g.freeze(self.store.id());
            let x = g.input(batch.images);
            let sf = batch.seg_features.map(|t| g.input(t));
            let out = self.forward(&mut g, x, sf, Mode::Eval)?;
            logits.push(g.value(out.logits).clone());
            if let Some(a) = out.aux {
                aux.push(g.value(a).clone());
            }
            start = end;
        }
        let stack = |v: &[Tensor]| Tensor::stack(&v.iter().collect::<Vec<_>>());
        let aux = (!aux.is_empty()).then(|| stack(&aux));
        Ok((stack(&logits), aux))
    }

    pub fn predict_inputs(&self, inputs: &FusedInputs) -> Result<Vec<GradePrediction>, GradeError> {
        let (logits, aux) = self.raw_outputs(inputs)?;
        Ok((0..logits.n())
            .map(|s| {
                let mut l = [0.0; NUM_GRADES];
                for (o, &v) in l.iter_mut().zip(logits.sample(s)) {
                    *o = f64::from(v);
                }
                let a = aux.as_ref().map(|a| {
                    let v = a.sample(s);
                    [v[0], v[1]].map(|z| f64::from(crate::nn::graph::sigmoid(z)))
                });
                GradePrediction::from_logits(l, a)
            })
            .collect())
    }

    pub fn predict(&self, dataset: &Dataset) -> Result<Vec<GradePrediction>, GradeError> {
        self.predict_inputs(&self.prepare(dataset)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::build_segmentation_model;

    fn cfg() -> GradeModelConfig {
        GradeModelConfig::new(Backbone::SmallCnn, 2, 4, 16)
    }

    fn run(model: &GradeModel, n: usize) -> (Tensor, Option<Tensor>) {
        let c = model.config.input_channels();
        let images = Tensor::full([n, c, 16, 16], 0.3);
        let sf = (model.config.fusion == Fusion::LesionFeatureConcat)
            .then(|| Tensor::full([n, model.pooled_channels() - model.feature_channels(), 1, 1], 0.1));
        model
            .raw_outputs(&FusedInputs {
                images,
                seg_features: sf,
            })
            .unwrap()
    }

    #[test]
    fn output_shapes() {
        for backbone in [Backbone::SmallCnn, Backbone::DenseBackbone] {
            let m = build_grading_model(&GradeModelConfig { backbone, ..cfg() }.with_aux_heads(true), 1, None).unwrap();
            let (logits, aux) = run(&m, 3);
            assert_eq!(logits.dims(), [3, 5, 1, 1]);
            assert_eq!(aux.unwrap().dims(), [3, 2, 1, 1]);
        }
        let plain = build_grading_model(&cfg(), 1, None).unwrap();
        assert!(run(&plain, 1).1.is_none());
    }

    #[test]
    fn same_seed_same_init() {
        let a = build_grading_model(&cfg(), 9, None).unwrap();
        let b = build_grading_model(&cfg(), 9, None).unwrap();
        let c = build_grading_model(&cfg(), 10, None).unwrap();
        assert_eq!(a.store.checksum(), b.store.checksum());
        assert_ne!(a.store.checksum(), c.store.checksum());
    }

    #[test]
    fn fusion_needs_segmentation_model() {
        let fused = cfg().with_fusion(Fusion::LesionMaskConcat);
        assert!(matches!(
            build_grading_model(&fused, 1, None),
            Err(GradeError::InvalidConfig(_))
        ));
        let one = build_segmentation_model(&SegModelConfig::new(SegVariant::Plain, 2, 4, 16), 1).unwrap();
        assert!(build_grading_model(&fused, 1, Some(one)).is_err());
        assert!(GradeModelConfig::new(Backbone::SmallCnn, 3, 4, 20).validate().is_err());
    }

    #[test]
    fn zero_lesion_maps_give_zero_extra_channels() {
        let seg_cfg = SegModelConfig::new(SegVariant::Multiclass, 2, 4, 16);
        let mut seg = build_segmentation_model(&seg_cfg, 3).unwrap();
        // push every logit to -inf through the head bias
        for id in seg.store.param_ids().collect::<Vec<_>>() {
            if seg.store.name(id).ends_with("head.w") {
                seg.store.value_mut(id).data_mut().fill(0.0);
            }
            if seg.store.name(id).ends_with("head.b") {
                seg.store.value_mut(id).data_mut().fill(-200.0);
            }
        }
        let images = Tensor::full([2, 3, 16, 16], 0.5);
        let fused = fuse_lesion_inputs(&images, Some(&seg), Fusion::LesionMaskConcat, 16).unwrap();
        assert_eq!(fused.images.dims(), [2, 9, 16, 16]);
        for s in 0..2 {
            assert!(fused.images.sample(s)[3 * 256..].iter().all(|&v| v == 0.0));
            assert_eq!(&fused.images.sample(s)[..3 * 256], images.sample(s));
        }
    }

    #[test]
    fn feature_fusion_adds_pooled_dims() {
        let seg_cfg = SegModelConfig::new(SegVariant::Dense, 2, 4, 16).with_out_channels(6);
        let seg = build_segmentation_model(&seg_cfg, 3).unwrap();
        let seg_c = seg.bottleneck_channels();
        let m = build_grading_model(&cfg().with_fusion(Fusion::LesionFeatureConcat), 1, Some(seg)).unwrap();
        assert_eq!(m.pooled_channels(), m.feature_channels() + seg_c);
        let fused = fuse_lesion_inputs(
            &Tensor::full([2, 3, 32, 32], 0.2),
            m.seg.as_ref(),
            Fusion::LesionFeatureConcat,
            16,
        )
        .unwrap();
        assert_eq!(fused.seg_features.as_ref().unwrap().dims(), [2, seg_c, 1, 1]);
        assert_eq!(m.predict_inputs(&fused).unwrap().len(), 2);
    }

    #[test]
    fn argmax_ties_and_shift_invariance() {
        assert_eq!(argmax_grade(&[0.0, 1.0, 1.0, 0.5, 1.0]), 1);
        assert_eq!(argmax_grade(&[2.0; 5]), 0);
        let l = [0.3, -1.0, 2.5, 2.4, 0.0];
        let shifted = l.map(|v| v + 17.25);
        assert_eq!(argmax_grade(&l), argmax_grade(&shifted));
    }
}
