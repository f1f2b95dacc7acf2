use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{adversarial_losses, inverse_prevalence_weights, total_loss, LossWeights};
use super::model::{
    build_transfer_system, dataset_images, Ablation, Domain, TargetBranch, TransferConfig, TransferSystem,
};
use super::TransferError;
use crate::data::{Dataset, LesionKind, DISEASE_NAMES, NUM_DISEASES};
use crate::metrics::{self, LabelScores, MetricError, MetricReport, MultiLabelScores};
use crate::nn::archive;
use crate::nn::{Graph, Mode, Optimizer, OptimizerConfig, OptimizerKind, Tensor, Var};
use crate::rng::indexed;
use crate::segnet::{
    prepare_inputs, seg_loss_logits, train_segmentation, History, LesionTarget, SegModel, TrainConfig,
};

/// Stage-1 defaults: Adam with first-moment decay 0.5, learning rate
/// 0.01, batch 32, 100 epochs.
pub fn pretrain_defaults(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 100,
        batch_size: 32,
        learning_rate: 0.01,
        optimizer: OptimizerKind::Adam,
        momentum: 0.5,
        seed,
        ..TrainConfig::default()
    }
}

/// Stage 1: the source branch alone under the segmentation loss.
pub fn pretrain_source(
    source: SegModel,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(SegModel, History), TransferError> {
    if source.config.out_channels != 6 {
        return Err(TransferError::InvalidConfig(
            "the source branch must predict all six lesion kinds".into(),
        ));
    }
    Ok(train_segmentation(source, data, LesionTarget::All, cfg, None)?)
}

fn default_epochs() -> usize {
    300
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f32 {
    1e-3
}
fn default_beta1() -> f32 {
    0.5
}
fn default_dice_weight() -> f64 {
    1.0
}

/// Stage-2 schedule. One epoch is one pass over the target data; source
/// batches are drawn cyclically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f32,
    /// Adam first-moment decay.
    #[serde(default = "default_beta1")]
    pub momentum: f32,
    #[serde(default = "default_dice_weight")]
    pub dice_weight: f64,
    /// Keep the source branch fixed (inference-mode normalization).
    #[serde(default)]
    pub freeze_source: bool,
    #[serde(default)]
    pub seed: u64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            momentum: default_beta1(),
            dice_weight: default_dice_weight(),
            freeze_source: false,
            seed: 0,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<(), TransferError> {
        if self.batch_size == 0 {
            return Err(TransferError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TransferError::InvalidConfig(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            momentum: self.momentum,
            ..OptimizerConfig::adam(self.learning_rate)
        }
    }
}

/// Target batches: a fresh permutation per epoch, last batch short.
#[derive(Clone, Debug)]
struct EpochSchedule {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSchedule {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut s = Self {
            n,
            batch,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order
            .shuffle(&mut indexed(self.seed, "target-order", self.epoch as u64));
        self.cursor = 0;
    }

    fn steps_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch)
    }

    /// Next batch and the epoch it belongs to.
    fn next(&mut self) -> (usize, Vec<usize>) {
        if self.cursor >= self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.cursor + self.batch).min(self.n);
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        (self.epoch, batch)
    }
}

/// Source batches of a fixed size, wrapping into a new permutation.
#[derive(Clone, Debug)]
struct CyclicSchedule {
    n: usize,
    seed: u64,
    cycle: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl CyclicSchedule {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            n,
            seed,
            cycle: 0,
            order: Vec::new(),
            cursor: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut indexed(self.seed, "source-order", self.cycle));
        self.cursor = 0;
    }

    fn take(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.cursor >= self.n {
                self.cycle += 1;
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn disease_labels(dataset: &Dataset) -> Result<Vec<[bool; NUM_DISEASES]>, TransferError> {
    dataset
        .samples
        .iter()
        .map(|s| {
            s.disease_labels.ok_or_else(|| TransferError::MissingLabels {
                id: s.id.clone(),
                what: "disease labels".into(),
            })
        })
        .collect()
}

fn label_tensor(labels: &[[bool; NUM_DISEASES]]) -> Tensor {
    Tensor::from_vec(
        [labels.len(), NUM_DISEASES, 1, 1],
        labels
            .iter()
            .flat_map(|l| l.iter().map(|&b| f32::from(u8::from(b))))
            .collect(),
    )
}

/// Target images, label tensor and positive weights.
struct TargetData {
    images: Tensor,
    labels: Tensor,
    pos_weight: Vec<f64>,
}

impl TargetData {
    fn load(dataset: &Dataset, size: usize) -> Result<Self, TransferError> {
        if dataset.is_empty() {
            return Err(TransferError::EmptyDomain("target dataset is empty".into()));
        }
        let labels = disease_labels(dataset)?;
        Ok(Self {
            images: dataset_images(dataset, size)?,
            labels: label_tensor(&labels),
            pos_weight: inverse_prevalence_weights(&labels),
        })
    }
}

fn scaled(t: Tensor, factor: f64) -> Tensor {
    if factor == 1.0 {
        t
    } else {
        let f = factor as f32;
        t.map(|v| v * f)
    }
}

/// Losses of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_s: f64,
    pub l_t: f64,
    pub l_a: f64,
    pub total: f64,
    pub disc_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointHistoryRow {
    pub epoch: usize,
    pub l_s: f64,
    pub l_t: f64,
    pub l_a: f64,
    pub total: f64,
    pub disc_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointHistory {
    pub rows: Vec<JointHistoryRow>,
}

impl JointHistory {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tL_S\tL_T\tL_A\ttotal\tdisc\n");
        for r in &self.rows {
            let d = r.disc_loss.map_or_else(|| "NA".into(), |v| v.to_string());
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}", r.epoch, r.l_s, r.l_t, r.l_a, r.total, d);
        }
        s
    }

    fn push_epoch(&mut self, epoch: usize, steps: &[StepLosses]) {
        let n = steps.len().max(1) as f64;
        let mean = |f: &dyn Fn(&StepLosses) -> f64| steps.iter().map(f).sum::<f64>() / n;
        let disc: Vec<f64> = steps.iter().filter_map(|s| s.disc_loss).collect();
        self.rows.push(JointHistoryRow {
            epoch,
            l_s: mean(&|s| s.l_s),
            l_t: mean(&|s| s.l_t),
            l_a: mean(&|s| s.l_a),
            total: mean(&|s| s.total),
            disc_loss: (!disc.is_empty()).then(|| disc.iter().sum::<f64>() / disc.len() as f64),
        });
    }
}

/// Stage-2 optimisation, one step at a time. Each step draws one target
/// batch and one source batch, runs a discriminator step (adversarial
/// rungs with `gamma > 0`), then a joint step on `L_S + lambda L_T +
/// gamma L_A`. The two steps freeze each other's parameters, so neither
/// objective reaches the other's networks.
pub struct JointTrainer {
    system: TransferSystem,
    weights: LossWeights,
    cfg: JointConfig,
    src_images: Tensor,
    src_masks: Tensor,
    src_pos_weight: Vec<f64>,
    target: TargetData,
    target_schedule: EpochSchedule,
    source_schedule: CyclicSchedule,
    opt_source: Optimizer,
    opt_target: Optimizer,
    opt_disc: Optimizer,
    steps: usize,
}

impl JointTrainer {
    pub fn new(
        system: TransferSystem,
        source_data: &Dataset,
        target_data: &Dataset,
        weights: LossWeights,
        cfg: &JointConfig,
    ) -> Result<Self, TransferError> {
        cfg.validate()?;
        weights.validate()?;
        if source_data.is_empty() {
            return Err(TransferError::EmptyDomain("source dataset is empty".into()));
        }
        let size = system.config.input_size;
        let (src_images, src_masks) = prepare_inputs(source_data, size, Some(&LesionKind::ALL))?;
        let src_masks = src_masks.expect("masks requested");
        let src_pos_weight = crate::segnet::channel_pos_weights(&src_masks);
        let target = TargetData::load(target_data, size)?;
        let opt = cfg.optimizer_config();
        Ok(Self {
            target_schedule: EpochSchedule::new(target.images.n(), cfg.batch_size, cfg.seed),
            source_schedule: CyclicSchedule::new(src_images.n(), cfg.seed),
            system,
            weights,
            cfg: cfg.clone(),
            src_images,
            src_masks,
            src_pos_weight,
            target,
            opt_source: Optimizer::new(opt),
            opt_target: Optimizer::new(opt),
            opt_disc: Optimizer::new(opt),
            steps: 0,
        })
    }

    pub fn system(&self) -> &TransferSystem {
        &self.system
    }

    pub fn into_system(self) -> TransferSystem {
        self.system
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.target_schedule.steps_per_epoch()
    }

    fn adversarial(&self) -> bool {
        self.system.disc.is_some() && self.weights.gamma > 0.0
    }

    fn source_mode(&self) -> Mode {
        if self.cfg.freeze_source {
            Mode::Eval
        } else {
            Mode::Train
        }
    }

    /// Target forward with the source pyramid injected when the rung has
    /// transfer connections.
    fn target_forward(&self, g: &mut Graph, xt: Var, mode: Mode) -> Result<super::model::TargetOutput, TransferError> {
        let inject = if self.system.target.has_transfer() {
            Some(self.system.source.forward(g, xt, self.source_mode())?.pyramid)
        } else {
            None
        };
        self.system.target.forward(g, xt, inject.as_deref(), mode)
    }

    fn disc_step(&mut self, xs: &Tensor, xt: &Tensor) -> Result<f64, TransferError> {
        let disc = self.system.disc.as_ref().expect("adversarial rung");
        let mut g = Graph::new();
        g.freeze(self.system.source.store.id());
        g.freeze(self.system.target.store.id());
        let xs = g.input(xs.clone());
        let xt = g.input(xt.clone());
        let s_out = self.system.source.forward(&mut g, xs, self.source_mode())?;
        let s_vec = g.global_avg_pool(s_out.bottleneck);
        let t_out = self.target_forward(&mut g, xt, Mode::Train)?;
        let ls = disc.forward(&mut g, s_vec, Domain::Source, Mode::Train)?;
        let lt = disc.forward(&mut g, t_out.pooled, Domain::Target, Mode::Train)?;
        let zs: Vec<f64> = g.value(ls).data().iter().map(|&v| f64::from(v)).collect();
        let zt: Vec<f64> = g.value(lt).data().iter().map(|&v| f64::from(v)).collect();
        let adv = adversarial_losses(&zs, &zt);
        let to_t = |v: &[f64]| Tensor::from_vec([v.len(), 1, 1, 1], v.iter().map(|&x| x as f32).collect());
        let grads = g.backward(&[(ls, to_t(&adv.d_disc_source)), (lt, to_t(&adv.d_disc_target))]);
        debug_assert!(!grads.touches(self.system.source.store.id()));
        debug_assert!(!grads.touches(self.system.target.store.id()));
        let obs = g.take_observations();
        let disc = self.system.disc.as_mut().expect("adversarial rung");
        self.opt_disc.step(&mut disc.store, &grads, 1.0);
        disc.store.apply_observations(&obs);
        Ok(adv.disc_loss)
    }

    /// One discriminator step (when active) followed by one joint step.
    pub fn step(&mut self) -> Result<StepLosses, TransferError> {
        let (_, tb) = self.target_schedule.next();
        let sb = self.source_schedule.take(tb.len());
        let xs_t = crate::segnet::gather(&self.src_images, &sb);
        let ys = crate::segnet::gather(&self.src_masks, &sb);
        let xt_t = crate::segnet::gather(&self.target.images, &tb);
        let yt = crate::segnet::gather(&self.target.labels, &tb);
        let disc_loss = if self.adversarial() {
            Some(self.disc_step(&xs_t, &xt_t)?)
        } else {
            None
        };

        let mut g = Graph::new();
        if let Some(d) = &self.system.disc {
            g.freeze(d.store.id());
        }
        if self.cfg.freeze_source {
            g.freeze(self.system.source.store.id());
        }
        let mut seeds = Vec::new();
        // the baseline rung never consults the source branch
        let l_s = if self.system.ablation.transfer() {
            let xs = g.input(xs_t);
            let out = self.system.source.forward(&mut g, xs, self.source_mode())?;
            let (l, grad) = seg_loss_logits(g.value(out.logits), &ys, &self.src_pos_weight, self.cfg.dice_weight)?;
            if g.requires_grad(out.logits) {
                seeds.push((out.logits, grad));
            }
            l
        } else {
            0.0
        };
        let xt = g.input(xt_t);
        let t_out = self.target_forward(&mut g, xt, Mode::Train)?;
        let (l_t, grad_t) = seg_loss_logits(g.value(t_out.logits), &yt, &self.target.pos_weight, 0.0)?;
        seeds.push((t_out.logits, scaled(grad_t, self.weights.lambda)));
        let l_a = if self.adversarial() {
            let disc = self.system.disc.as_ref().expect("adversarial rung");
            let z = disc.forward(&mut g, t_out.pooled, Domain::Target, Mode::Train)?;
            let zt: Vec<f64> = g.value(z).data().iter().map(|&v| f64::from(v)).collect();
            let adv = adversarial_losses(&[], &zt);
            let grad = Tensor::from_vec(
                [zt.len(), 1, 1, 1],
                adv.d_adapt_target.iter().map(|&v| v as f32).collect(),
            );
            seeds.push((z, scaled(grad, self.weights.gamma)));
            adv.adapt_loss
        } else {
            0.0
        };
        let grads = g.backward(&seeds);
        let obs = g.take_observations();
        if !self.cfg.freeze_source {
            self.opt_source.step(&mut self.system.source.store, &grads, 1.0);
            self.system.source.store.apply_observations(&obs);
        }
        self.opt_target.step(&mut self.system.target.store, &grads, 1.0);
        self.system.target.store.apply_observations(&obs);
        self.steps += 1;
        Ok(StepLosses {
            l_s,
            l_t,
            l_a,
            total: total_loss(l_s, l_t, l_a, self.weights)?,
            disc_loss,
        })
    }

    /// Run `cfg.epochs` epochs of steps.
    pub fn run(mut self) -> Result<(TransferSystem, JointHistory), TransferError> {
        let mut history = JointHistory::default();
        let per_epoch = self.steps_per_epoch();
        for epoch in 0..self.cfg.epochs {
            let mut steps = Vec::with_capacity(per_epoch);
            for _ in 0..per_epoch {
                steps.push(self.step()?);
            }
            history.push_epoch(epoch + 1, &steps);
            log::debug!("joint epoch {} total {:.5}", epoch + 1, history.rows[epoch].total);
        }
        Ok((self.system, history))
    }
}

/// Stage 2 of the transfer method for `system`'s ablation rung.
pub fn train_joint(
    system: TransferSystem,
    source_data: &Dataset,
    target_data: &Dataset,
    weights: LossWeights,
    cfg: &JointConfig,
) -> Result<(TransferSystem, JointHistory), TransferError> {
    JointTrainer::new(system, source_data, target_data, weights, cfg)?.run()
}

/// Trains a target branch on `L_T` alone, optionally with transfer
/// connections from a fixed source network. This is the directly built
/// counterpart of the baseline and transfer-only rungs, sharing their
/// batch schedule.
pub struct TargetTrainer {
    target: TargetBranch,
    source: Option<SegModel>,
    data: TargetData,
    schedule: EpochSchedule,
    opt: Optimizer,
}

impl TargetTrainer {
    pub fn new(
        target: TargetBranch,
        source: Option<SegModel>,
        target_data: &Dataset,
        cfg: &JointConfig,
    ) -> Result<Self, TransferError> {
        cfg.validate()?;
        if target.has_transfer() != source.is_some() {
            return Err(TransferError::InvalidConfig(
                "a source network is needed exactly when the target has transfer connections".into(),
            ));
        }
        let data = TargetData::load(target_data, target.config.input_size)?;
        Ok(Self {
            schedule: EpochSchedule::new(data.images.n(), cfg.batch_size, cfg.seed),
            target,
            source,
            data,
            opt: Optimizer::new(cfg.optimizer_config()),
        })
    }

    pub fn target(&self) -> &TargetBranch {
        &self.target
    }

    pub fn step(&mut self) -> Result<f64, TransferError> {
        let (_, tb) = self.schedule.next();
        let mut g = Graph::new();
        let xt = g.input(crate::segnet::gather(&self.data.images, &tb));
        let yt = crate::segnet::gather(&self.data.labels, &tb);
        let inject = match &self.source {
            Some(src) => {
                g.freeze(src.store.id());
                Some(src.forward(&mut g, xt, Mode::Eval)?.pyramid)
            }
            None => None,
        };
        let out = self.target.forward(&mut g, xt, inject.as_deref(), Mode::Train)?;
        let (l_t, grad) = seg_loss_logits(g.value(out.logits), &yt, &self.data.pos_weight, 0.0)?;
        let grads = g.backward(&[(out.logits, grad)]);
        let obs = g.take_observations();
        self.opt.step(&mut self.target.store, &grads, 1.0);
        self.target.store.apply_observations(&obs);
        Ok(l_t)
    }
}

fn nan_on_degenerate(r: Result<f64, MetricError>) -> Result<f64, MetricError> {
    match r {
        Err(MetricError::DegenerateLabels(_) | MetricError::DegenerateAgreement) => Ok(f64::NAN),
        other => other,
    }
}

fn finite_mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-label accuracy, kappa, F-1 and AUC-ROC at threshold 0.5, and their
/// means over labels. Undefined per-label values (a label constant on
/// both sides) are NaN and left out of the means.
pub fn multilabel_scores(
    probs: &[[f64; NUM_DISEASES]],
    labels: &[[bool; NUM_DISEASES]],
) -> Result<MultiLabelScores, TransferError> {
    if probs.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            pred: probs.len(),
            gt: labels.len(),
        }
        .into());
    }
    let mut per_label = Vec::with_capacity(NUM_DISEASES);
    for (d, name) in DISEASE_NAMES.iter().enumerate() {
        let scores: Vec<f64> = probs.iter().map(|p| p[d]).collect();
        let truth: Vec<bool> = labels.iter().map(|l| l[d]).collect();
        let pred: Vec<bool> = scores.iter().map(|&p| p >= 0.5).collect();
        let pu: Vec<usize> = pred.iter().map(|&b| usize::from(b)).collect();
        let tu: Vec<usize> = truth.iter().map(|&b| usize::from(b)).collect();
        per_label.push((
            name.to_string(),
            LabelScores {
                accuracy: metrics::accuracy(&pu, &tu)?,
                kappa: nan_on_degenerate(metrics::cohens_kappa(&pu, &tu))?,
                f1: metrics::f1_score(&pred, &truth)?,
                auc_roc: nan_on_degenerate(metrics::auc_roc(&scores, &truth))?,
            },
        ));
    }
    Ok(MultiLabelScores {
        kappa: finite_mean(per_label.iter().map(|(_, s)| s.kappa)),
        f1: finite_mean(per_label.iter().map(|(_, s)| s.f1)),
        auc_roc: finite_mean(per_label.iter().map(|(_, s)| s.auc_roc)),
        per_label,
    })
}

pub fn evaluate_multidisease(system: &TransferSystem, test: &Dataset) -> Result<MetricReport, TransferError> {
    let labels = disease_labels(test)?;
    let probs = system.predict(test)?;
    Ok(MetricReport::MultiLabel(multilabel_scores(&probs, &labels)?))
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: TransferConfig,
    ablation: Ablation,
    seed: u64,
    weights: LossWeights,
    stage: String,
}

const CHECKPOINT_KIND: &str = "transfer";

/// All networks of `system` plus the loss weights and a stage tag.
pub fn save_transfer_checkpoint(
    system: &TransferSystem,
    weights: LossWeights,
    stage: &str,
    path: &Path,
) -> Result<(), TransferError> {
    let meta = CheckpointMeta {
        kind: CHECKPOINT_KIND.into(),
        config: system.config.clone(),
        ablation: system.ablation,
        seed: system.seed,
        weights,
        stage: stage.into(),
    };
    let mut stores = vec![&system.source.store, &system.target.store];
    if let Some(d) = &system.disc {
        stores.push(&d.store);
    }
    archive::write(path, &meta, &stores)?;
    Ok(())
}

/// Returns the system, its loss weights and the stage tag.
pub fn load_transfer_checkpoint(path: &Path) -> Result<(TransferSystem, LossWeights, String), TransferError> {
    let (meta, stores): (CheckpointMeta, _) = match archive::read(path, 2) {
        Err(archive::ArchiveError::StoreCount { .. }) => archive::read(path, 3)?,
        other => other?,
    };
    if meta.kind != CHECKPOINT_KIND {
        return Err(TransferError::InvalidConfig(format!(
            "{} holds a {} checkpoint",
            path.display(),
            meta.kind
        )));
    }
    let mut system = build_transfer_system(&meta.config, meta.ablation, meta.seed)?;
    let bad = TransferError::InvalidConfig;
    system.source.store.copy_values_from(&stores[0]).map_err(bad)?;
    system.target.store.copy_values_from(&stores[1]).map_err(bad)?;
    match (&mut system.disc, stores.get(2)) {
        (Some(d), Some(s)) => d.store.copy_values_from(s).map_err(bad)?,
        (None, None) => {}
        _ => return Err(bad("discriminator parameters do not match the ablation".into())),
    }
    Ok((system, meta.weights, meta.stage))
}
