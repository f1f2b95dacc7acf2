use serde::{Deserialize, Serialize};

use super::TransferError;
use crate::data::{Dataset, NUM_DISEASES};
use crate::grading::{cam_from_features, CamMap};
use crate::nn::layers::{BatchNorm, Conv};
use crate::nn::tensor::resize_bilinear;
use crate::nn::{BufferId, Graph, Mode, ParamId, ParamStore, Tensor, Var};
use crate::segnet::{build_segmentation_model, DenseEncoder, SegModel, SegModelConfig, SegVariant};

fn default_growth() -> usize {
    8
}
fn default_dense_layers() -> usize {
    2
}
fn default_disc_hidden() -> usize {
    32
}

/// Shared shape of the source and target networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub depth: usize,
    pub base_channels: usize,
    #[serde(default = "default_growth")]
    pub growth_rate: usize,
    #[serde(default = "default_dense_layers")]
    pub dense_layers: usize,
    pub input_size: usize,
    #[serde(default = "default_disc_hidden")]
    pub disc_hidden: usize,
}

impl TransferConfig {
    pub fn new(depth: usize, base_channels: usize, input_size: usize) -> Self {
        Self {
            depth,
            base_channels,
            growth_rate: default_growth(),
            dense_layers: default_dense_layers(),
            input_size,
            disc_hidden: default_disc_hidden(),
        }
    }

    /// Six-lesion dense U-Net configuration of the source branch.
    pub fn source_config(&self) -> SegModelConfig {
        SegModelConfig {
            variant: SegVariant::Dense,
            depth: self.depth,
            base_channels: self.base_channels,
            growth_rate: self.growth_rate,
            dense_layers: self.dense_layers,
            input_size: self.input_size,
            out_channels: 6,
        }
    }

    pub fn validate(&self) -> Result<(), TransferError> {
        self.source_config().validate()?;
        if self.disc_hidden == 0 {
            return Err(TransferError::InvalidConfig("disc_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Rungs of the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Target classifier alone.
    Baseline,
    /// Plus multi-scale transfer connections.
    Mtc,
    /// Plus adversarial adaptation with shared normalization.
    MtcAa,
    /// Plus adversarial adaptation with domain-specific normalization.
    MtcDsaa,
}

impl Ablation {
    pub const LADDER: [Ablation; 4] = [Ablation::Baseline, Ablation::Mtc, Ablation::MtcAa, Ablation::MtcDsaa];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Baseline => "B",
            Ablation::Mtc => "B+MTC",
            Ablation::MtcAa => "B+MTC+AA",
            Ablation::MtcDsaa => "B+MTC+DSAA",
        }
    }

    pub fn transfer(self) -> bool {
        self != Ablation::Baseline
    }

    pub fn adversarial(self) -> bool {
        matches!(self, Ablation::MtcAa | Ablation::MtcDsaa)
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "b" | "baseline" => Ok(Self::Baseline),
            "b+mtc" | "mtc" => Ok(Self::Mtc),
            "b+mtc+aa" | "mtc-aa" => Ok(Self::MtcAa),
            "b+mtc+dsaa" | "mtc-dsaa" => Ok(Self::MtcDsaa),
            other => Err(format!("unknown ablation {other:?}")),
        }
    }
}

/// Dense U-Net with six lesion outputs whose encoder exposes its feature
/// pyramid.
pub fn build_source_branch(config: &TransferConfig, seed: u64) -> Result<SegModel, TransferError> {
    config.validate()?;
    Ok(build_segmentation_model(&config.source_config(), seed)?)
}

/// Per-scale channel concatenation of two pyramids.
pub fn multi_scale_transfer(g: &mut Graph, source: &[Var], target: &[Var]) -> Result<Vec<Var>, TransferError> {
    if source.len() != target.len() {
        return Err(TransferError::ScaleMismatch(format!(
            "{} source scales vs {} target scales",
            source.len(),
            target.len()
        )));
    }
    let mut fused = Vec::with_capacity(source.len());
    for (s, (&a, &b)) in target.iter().zip(source).enumerate() {
        let (da, db) = (g.value(a).dims(), g.value(b).dims());
        if da[0] != db[0] || da[2..] != db[2..] {
            return Err(TransferError::ScaleMismatch(format!(
                "scale {s}: target {da:?} vs source {db:?}"
            )));
        }
        fused.push(g.concat(&[a, b]));
    }
    Ok(fused)
}

/// Multi-label classifier: dense encoder, global average pooling and a
/// linear head with one logit per disease.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetBranch {
    pub config: TransferConfig,
    pub seed: u64,
    pub store: ParamStore,
    /// Channels injected per scale, empty without transfer connections.
    pub transfer_channels: Vec<usize>,
    encoder: DenseEncoder,
    pub(crate) head: Conv,
}

#[derive(Clone, Debug)]
pub struct TargetOutput {
    /// `[n, 8, 1, 1]`.
    pub logits: Var,
    /// Bottleneck maps before pooling.
    pub bottleneck: Var,
    /// Pooled bottleneck `[n, c, 1, 1]`, the vector seen by the
    /// discriminator.
    pub pooled: Var,
    /// Block outputs per scale.
    pub pyramid: Vec<Var>,
}

/// `source_channels` lists the channels injected at each scale (use the
/// source branch's [`SegModel::pyramid_channels`]); `None` builds the
/// plain baseline.
pub fn build_target_branch(
    config: &TransferConfig,
    seed: u64,
    source_channels: Option<&[usize]>,
) -> Result<TargetBranch, TransferError> {
    config.validate()?;
    let transfer_channels = source_channels.map(<[usize]>::to_vec).unwrap_or_default();
    if source_channels.is_some() && transfer_channels.len() != config.depth {
        return Err(TransferError::ScaleMismatch(format!(
            "{} source scales for a depth-{} target",
            transfer_channels.len(),
            config.depth
        )));
    }
    let mut store = ParamStore::new("target");
    let seg_cfg = config.source_config();
    let encoder = DenseEncoder::new(&mut store, seed, "enc", 3, &seg_cfg, &transfer_channels);
    let head = Conv::new(
        &mut store,
        seed,
        "head",
        encoder.bottleneck_channels(),
        NUM_DISEASES,
        1,
        true,
    );
    Ok(TargetBranch {
        config: config.clone(),
        seed,
        store,
        transfer_channels,
        encoder,
        head,
    })
}

impl TargetBranch {
    pub fn has_transfer(&self) -> bool {
        !self.transfer_channels.is_empty()
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.encoder.bottleneck_channels()
    }

    pub fn scale_channels(&self) -> Vec<usize> {
        self.encoder.scale_channels()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        inject: Option<&[Var]>,
        mode: Mode,
    ) -> Result<TargetOutput, TransferError> {
        let inject = match (self.has_transfer(), inject) {
            (false, _) => None,
            (true, Some(v)) if v.len() == self.transfer_channels.len() => Some(v),
            (true, Some(v)) => {
                return Err(TransferError::ScaleMismatch(format!(
                    "{} injected scales, expected {}",
                    v.len(),
                    self.transfer_channels.len()
                )))
            }
            (true, None) => {
                return Err(TransferError::ScaleMismatch(
                    "transfer connections need the source pyramid".into(),
                ))
            }
        };
        let out = self.encoder.forward(g, &self.store, x, mode, inject);
        let pooled = g.global_avg_pool(out.bottleneck);
        let logits = self.head.forward(g, &self.store, pooled);
        Ok(TargetOutput {
            logits,
            bottleneck: out.bottleneck,
            pooled,
            pyramid: out.scales,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Source,
    Target,
}

/// Normalization with one branch per domain, or a single tied branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainNorm {
    pub source: BatchNorm,
    /// `None` when both domains share `source`.
    pub target: Option<BatchNorm>,
}

impl DomainNorm {
    fn new(store: &mut ParamStore, name: &str, channels: usize, split: bool) -> Self {
        if split {
            Self {
                source: BatchNorm::new(store, &format!("{name}.src"), channels),
                target: Some(BatchNorm::new(store, &format!("{name}.tgt"), channels)),
            }
        } else {
            Self {
                source: BatchNorm::new(store, &format!("{name}.shared"), channels),
                target: None,
            }
        }
    }

    pub fn branch(&self, domain: Domain) -> &BatchNorm {
        match (domain, &self.target) {
            (Domain::Target, Some(t)) => t,
            _ => &self.source,
        }
    }
}

/// Two 1x1 convolutions over the pooled feature vector, each followed by
/// domain-routed normalization and a leaky ReLU, then a scalar logit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDiscriminator {
    pub seed: u64,
    pub store: ParamStore,
    pub domain_specific: bool,
    convs: [Conv; 2],
    norms: [DomainNorm; 2],
    head: Conv,
}

const DISC_SLOPE: f32 = 0.2;

pub fn build_discriminator(feature_len: usize, hidden: usize, domain_specific: bool, seed: u64) -> DomainDiscriminator {
    let mut store = ParamStore::new("disc");
    let c0 = Conv::new(&mut store, seed, "conv0", feature_len, hidden, 1, false);
    let n0 = DomainNorm::new(&mut store, "norm0", hidden, domain_specific);
    let c1 = Conv::new(&mut store, seed, "conv1", hidden, hidden, 1, false);
    let n1 = DomainNorm::new(&mut store, "norm1", hidden, domain_specific);
    let head = Conv::new(&mut store, seed, "head", hidden, 1, 1, true);
    DomainDiscriminator {
        seed,
        store,
        domain_specific,
        convs: [c0, c1],
        norms: [n0, n1],
        head,
    }
}

impl DomainDiscriminator {
    pub fn feature_len(&self) -> usize {
        self.convs[0].in_c
    }

    /// Logits `[n, 1, 1, 1]` for pooled features `[n, c, 1, 1]`, routed
    /// through the normalization branch of `domain`.
    pub fn forward(&self, g: &mut Graph, features: Var, domain: Domain, mode: Mode) -> Result<Var, TransferError> {
        let c = g.value(features).c();
        if c != self.feature_len() {
            return Err(TransferError::ScaleMismatch(format!(
                "discriminator expects {} features, got {c}",
                self.feature_len()
            )));
        }
        let mut h = features;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(g, &self.store, h);
            h = norm.branch(domain).forward(g, &self.store, h, mode);
            h = g.leaky_relu(h, DISC_SLOPE);
        }
        Ok(self.head.forward(g, &self.store, h))
    }

    /// Parameters and running statistics of one domain's normalization.
    pub fn branch_state(&self, domain: Domain) -> (Vec<ParamId>, Vec<BufferId>) {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for n in &self.norms {
            let b = n.branch(domain);
            params.extend(b.params());
            buffers.extend(b.buffers());
        }
        (params, buffers)
    }

    /// Bit-level checksum of [`Self::branch_state`].
    pub fn branch_checksum(&self, domain: Domain) -> (u64, u64) {
        let (p, b) = self.branch_state(domain);
        (self.store.param_checksum(&p), self.store.buffer_checksum(&b))
    }
}

/// Source branch, target branch and (for the adversarial rungs) the
/// discriminator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferSystem {
    pub config: TransferConfig,
    pub ablation: Ablation,
    pub seed: u64,
    pub source: SegModel,
    pub target: TargetBranch,
    pub disc: Option<DomainDiscriminator>,
}

/// Fresh system for one ablation rung. The three networks draw their
/// initial values from `seed` under distinct name prefixes.
pub fn build_transfer_system(
    config: &TransferConfig,
    ablation: Ablation,
    seed: u64,
) -> Result<TransferSystem, TransferError> {
    let source = build_source_branch(config, seed)?;
    let channels = source.pyramid_channels();
    let target = build_target_branch(config, seed, ablation.transfer().then_some(channels.as_slice()))?;
    if target.bottleneck_channels() != source.bottleneck_channels() {
        return Err(TransferError::ScaleMismatch(format!(
            "bottleneck {} vs {}",
            target.bottleneck_channels(),
            source.bottleneck_channels()
        )));
    }
    let disc = ablation.adversarial().then(|| {
        build_discriminator(
            target.bottleneck_channels(),
            config.disc_hidden,
            ablation == Ablation::MtcDsaa,
            seed,
        )
    });
    Ok(TransferSystem {
        config: config.clone(),
        ablation,
        seed,
        source,
        target,
        disc,
    })
}

const CHUNK: usize = 8;

/// Images of `dataset` at `size`, `[n, 3, size, size]`.
pub(crate) fn dataset_images(dataset: &Dataset, size: usize) -> Result<Tensor, TransferError> {
    if dataset.is_empty() {
        return Err(TransferError::EmptyDomain("dataset has no samples".into()));
    }
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let images = dataset.image_tensor(&idx);
    Ok(if images.h() == size && images.w() == size {
        images
    } else {
        resize_bilinear(&images, size, size)
    })
}

impl TransferSystem {
    /// Target forward in inference mode with both networks frozen.
    pub(crate) fn eval_forward(&self, g: &mut Graph, images: Tensor) -> Result<TargetOutput, TransferError> {
        g.freeze(self.source.store.id());
        g.freeze(self.target.store.id());
        let x = g.input(images);
        let inject = if self.target.has_transfer() {
            Some(self.source.forward(g, x, Mode::Eval)?.pyramid)
        } else {
            None
        };
        self.target.forward(g, x, inject.as_deref(), Mode::Eval)
    }

    /// Disease logits `[n, 8]` for `images` at the configured size.
    pub fn predict_logits(&self, images: &Tensor) -> Result<Vec<[f64; NUM_DISEASES]>, TransferError> {
        let mut out = Vec::with_capacity(images.n());
        let mut start = 0;
        while start < images.n() {
            let end = (start + CHUNK).min(images.n());
            let mut g = Graph::new();
            let t = self.eval_forward(&mut g, images.slice_batch(start, end))?;
            let logits = g.value(t.logits);
            for s in 0..logits.n() {
                let mut row = [0.0; NUM_DISEASES];
                for (o, &v) in row.iter_mut().zip(logits.sample(s)) {
                    *o = f64::from(v);
                }
                out.push(row);
            }
            start = end;
        }
        Ok(out)
    }

    /// Sigmoid probabilities per sample and disease.
    pub fn predict(&self, dataset: &Dataset) -> Result<Vec<[f64; NUM_DISEASES]>, TransferError> {
        let images = dataset_images(dataset, self.config.input_size)?;
        Ok(self
            .predict_logits(&images)?
            .into_iter()
            .map(|row| row.map(|z| 1.0 / (1.0 + (-z).exp())))
            .collect())
    }

    /// Pre-pooling response of `disease` for sample `index` of `dataset`:
    /// the head weights applied to the bottleneck maps, min-max normalized.
    pub fn logit_map(&self, dataset: &Dataset, index: usize, disease: usize) -> Result<CamMap, TransferError> {
        if disease >= NUM_DISEASES {
            return Err(TransferError::Unsupported(format!("disease index {disease}")));
        }
        if index >= dataset.len() {
            return Err(TransferError::EmptyDomain(format!(
                "sample {index} of {}",
                dataset.len()
            )));
        }
        let images = dataset_images(&dataset.subset(&[index], "probe"), self.config.input_size)?;
        let mut g = Graph::new();
        let t = self.eval_forward(&mut g, images)?;
        let f = g.value(t.bottleneck);
        let [_, c, h, w] = f.dims();
        let weights = self.target.store.value(self.target.head.weight);
        Ok(cam_from_features(
            f.sample(0),
            c,
            h,
            w,
            &weights.data()[disease * c..(disease + 1) * c],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TransferConfig {
        TransferConfig::new(2, 4, 16)
    }

    #[test]
    fn source_pyramid_and_masks() {
        let src = build_source_branch(&cfg(), 1).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::full([2, 3, 16, 16], 0.4));
        let out = src.forward(&mut g, x, Mode::Eval).unwrap();
        assert_eq!(g.value(out.logits).dims(), [2, 6, 16, 16]);
        for (s, v) in out.pyramid.iter().enumerate() {
            assert_eq!(g.value(*v).h(), 16 >> s);
        }
        let again = build_source_branch(&cfg(), 1).unwrap();
        assert_eq!(src.store.checksum(), again.store.checksum());
    }

    #[test]
    fn target_outputs_and_bottleneck_match_source() {
        for ablation in Ablation::LADDER {
            let sys = build_transfer_system(&cfg(), ablation, 3).unwrap();
            assert_eq!(sys.target.bottleneck_channels(), sys.source.bottleneck_channels());
            assert_eq!(sys.disc.is_some(), ablation.adversarial());
            let logits = sys.predict_logits(&Tensor::full([3, 3, 16, 16], 0.5)).unwrap();
            assert_eq!(logits.len(), 3);
            let probs: Vec<f64> = logits.iter().flatten().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
            assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn baseline_ignores_source_branch() {
        let mut sys = build_transfer_system(&cfg(), Ablation::Baseline, 3).unwrap();
        let images = Tensor::full([2, 3, 16, 16], 0.5);
        let before = sys.predict_logits(&images).unwrap();
        for id in sys.source.store.param_ids().collect::<Vec<_>>() {
            sys.source.store.value_mut(id).data_mut().fill(0.123);
        }
        assert_eq!(before, sys.predict_logits(&images).unwrap());
    }

    #[test]
    fn scale_mismatch_is_rejected() {
        assert!(matches!(
            build_target_branch(&cfg(), 1, Some(&[4, 4, 4])),
            Err(TransferError::ScaleMismatch(_))
        ));
        let t = build_target_branch(&cfg(), 1, Some(&[4, 4])).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, 3, 16, 16]));
        assert!(t.forward(&mut g, x, None, Mode::Eval).is_err());
    }

    #[test]
    fn transfer_concat_semantics() {
        let mut g = Graph::new();
        let a = g.input(Tensor::full([1, 2, 4, 4], 1.5));
        let b = g.input(Tensor::zeros([1, 3, 4, 4]));
        let a2 = g.input(Tensor::full([1, 1, 2, 2], -1.0));
        let b2 = g.input(Tensor::zeros([1, 5, 2, 2]));
        let fused = multi_scale_transfer(&mut g, &[b, b2], &[a, a2]).unwrap();
        assert_eq!(g.value(fused[0]).c(), 5);
        assert_eq!(g.value(fused[1]).c(), 6);
        assert_eq!(&g.value(fused[0]).data()[..32], g.value(a).data());
        assert_eq!(&g.value(fused[1]).data()[..4], g.value(a2).data());
        assert!(multi_scale_transfer(&mut g, &[b], &[a, a2]).is_err());
        assert!(multi_scale_transfer(&mut g, &[b2, b], &[a, a2]).is_err());
    }

    #[test]
    fn discriminator_branches_start_symmetric() {
        let d = build_discriminator(6, 8, true, 4);
        let feats = Tensor::from_vec([4, 6, 1, 1], (0..24).map(|i| (i as f32 * 0.37).sin()).collect());
        let mut out = Vec::new();
        for domain in [Domain::Source, Domain::Target] {
            let mut g = Graph::new();
            let x = g.input(feats.clone());
            let l = d.forward(&mut g, x, domain, Mode::Train).unwrap();
            out.push(g.value(l).clone());
        }
        assert_eq!(out[0], out[1]);
        let shared = build_discriminator(6, 8, false, 4);
        assert_eq!(shared.branch_state(Domain::Source), shared.branch_state(Domain::Target));
        assert_ne!(d.branch_state(Domain::Source), d.branch_state(Domain::Target));
    }

    #[test]
    fn logit_map_shape() {
        let sys = build_transfer_system(&cfg(), Ablation::Mtc, 2).unwrap();
        let ds = crate::data::synthesize_multidisease(&crate::data::DiseasePhantomSpec::new(2, 32, 1))
            .unwrap()
            .0;
        let map = sys.logit_map(&ds, 1, 3).unwrap();
        assert_eq!((map.width, map.height), (4, 4));
        assert!(sys.logit_map(&ds, 0, 8).is_err());
    }
}
