use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{auto_pos_weight, seg_loss_logits};
use super::model::{build_segmentation_model, SegModel, SegModelConfig};
use super::SegError;
use crate::data::{write_mask_png, write_rgb_png, DataError, Dataset, LesionKind, Mask};
use crate::metrics::{self, MetricError, MetricReport, SegScores};
use crate::nn::archive;
use crate::nn::tensor::{resize_bilinear, resize_nearest};
use crate::nn::{Graph, Mode, Optimizer, OptimizerConfig, OptimizerKind, Tensor};
use crate::rng::indexed;

/// Which lesion(s) a model segments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LesionTarget {
    One(LesionKind),
    All,
}

impl LesionTarget {
    pub fn kinds(&self) -> Vec<LesionKind> {
        match self {
            LesionTarget::One(k) => vec![*k],
            LesionTarget::All => LesionKind::ALL.to_vec(),
        }
    }
}

impl std::str::FromStr for LesionTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(LesionTarget::All);
        }
        s.parse::<LesionKind>()
            .map(LesionTarget::One)
            .map_err(|e| e.to_string())
    }
}

fn default_epochs() -> usize {
    50
}
fn default_batch() -> usize {
    8
}
fn default_lr() -> f32 {
    1e-3
}
fn default_momentum() -> f32 {
    0.9
}
fn default_dice_weight() -> f64 {
    1.0
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f32,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    /// SGD momentum, or the Adam first-moment decay.
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    /// Positive-class weight; `None` derives it per channel from the
    /// training masks.
    #[serde(default)]
    pub pos_weight: Option<f64>,
    #[serde(default = "default_dice_weight")]
    pub dice_weight: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            optimizer: default_optimizer(),
            momentum: default_momentum(),
            pos_weight: None,
            dice_weight: default_dice_weight(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SegError> {
        let bad = |m: &str| Err(SegError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return bad("momentum must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be > 0");
        }
        if self.pos_weight.is_some_and(|w| !(w >= 1.0)) {
            return bad("pos_weight must be >= 1");
        }
        if !(self.dice_weight >= 0.0) {
            return bad("dice_weight must be >= 0");
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            momentum: self.momentum,
            ..OptimizerConfig::adam(self.learning_rate)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub val_dice: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub rows: Vec<HistoryRow>,
    pub warnings: Vec<String>,
}

impl History {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tloss\tval_dice\n");
        for r in &self.rows {
            let v = r.val_dice.map_or("-".to_string(), |d| d.to_string());
            s.push_str(&format!("{}\t{}\t{v}\n", r.epoch, r.loss));
        }
        s
    }
}

/// Images resized (bilinear) to `size` as `[n, 3, size, size]`, and when
/// `kinds` is given, masks resized (nearest) as `[n, kinds, size, size]`.
pub fn prepare_inputs(
    dataset: &Dataset,
    size: usize,
    kinds: Option<&[LesionKind]>,
) -> Result<(Tensor, Option<Tensor>), SegError> {
    let mut images = Vec::with_capacity(dataset.len());
    let mut masks = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        let img = dataset.image_tensor(&[i]);
        images.push(if img.h() == size && img.w() == size {
            img
        } else {
            resize_bilinear(&img, size, size)
        });
        if let Some(kinds) = kinds {
            if s.lesion_masks.is_none() {
                return Err(SegError::MissingLabels {
                    id: s.id.clone(),
                    what: "lesion masks".into(),
                });
            }
            let m = dataset.mask_tensor(&[i], kinds);
            masks.push(if m.h() == size && m.w() == size {
                m
            } else {
                resize_nearest(&m, size, size)
            });
        }
    }
    if images.is_empty() {
        return Err(SegError::Data(DataError::EmptyDataset));
    }
    let stack = |v: &[Tensor]| Tensor::stack(&v.iter().collect::<Vec<_>>());
    let masks = kinds.map(|_| stack(&masks));
    Ok((stack(&images), masks))
}

pub(crate) fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let parts: Vec<Tensor> = idx.iter().map(|&i| t.slice_batch(i, i + 1)).collect();
    Tensor::stack(&parts.iter().collect::<Vec<_>>())
}

/// Channels a model predicts for `target`.
fn model_kinds(model: &SegModel, target: LesionTarget) -> Result<Vec<LesionKind>, SegError> {
    match (model.config.out_channels, target) {
        (6, LesionTarget::All) => Ok(LesionKind::ALL.to_vec()),
        (1, LesionTarget::One(k)) => Ok(vec![k]),
        (6, LesionTarget::One(_)) => Ok(LesionKind::ALL.to_vec()),
        (c, t) => Err(SegError::InvalidConfig(format!(
            "a {c}-channel model cannot segment {t:?}"
        ))),
    }
}

/// Per-channel positive weights for `masks` `[n, c, h, w]`.
pub(crate) fn channel_pos_weights(masks: &Tensor) -> Vec<f64> {
    (0..masks.c())
        .map(|c| {
            let mut pos = 0;
            for s in 0..masks.n() {
                pos += masks.plane(s, c).iter().filter(|&&v| v > 0.5).count();
            }
            auto_pos_weight(pos, masks.n() * masks.plane_len())
        })
        .collect()
}

/// Mean Dice (threshold 0.5) over channels of `probs` against `masks`.
fn mean_dice(probs: &Tensor, masks: &Tensor) -> Result<f64, MetricError> {
    let mut total = 0.0;
    for c in 0..probs.c() {
        let (p, g) = channel_values(probs, masks, c);
        total += metrics::dice(&p, &g, 0.5)?;
    }
    Ok(total / probs.c() as f64)
}

fn channel_values(probs: &Tensor, masks: &Tensor, c: usize) -> (Vec<f64>, Vec<bool>) {
    let mut p = Vec::with_capacity(probs.n() * probs.plane_len());
    let mut g = Vec::with_capacity(p.capacity());
    for s in 0..probs.n() {
        p.extend(probs.plane(s, c).iter().map(|&v| f64::from(v)));
        g.extend(masks.plane(s, c).iter().map(|&v| v > 0.5));
    }
    (p, g)
}

/// One optimisation step on a batch; returns the batch loss.
pub(crate) fn seg_step(
    model: &mut SegModel,
    opt: &mut Optimizer,
    x: Tensor,
    y: &Tensor,
    pos_weight: &[f64],
    dice_weight: f64,
) -> Result<f64, SegError> {
    let mut g = Graph::new();
    let xv = g.input(x);
    let out = model.forward(&mut g, xv, Mode::Train)?;
    let (loss, grad) = seg_loss_logits(g.value(out.logits), y, pos_weight, dice_weight)?;
    let grads = g.backward(&[(out.logits, grad)]);
    let obs = g.take_observations();
    opt.step(&mut model.store, &grads, 1.0);
    model.store.apply_observations(&obs);
    Ok(loss)
}

/// Train `model` on `train` for `cfg.epochs` epochs. Batches follow a
/// per-epoch permutation drawn from `cfg.seed`, so runs are bitwise
/// reproducible. `val`, when given, adds a Dice column to the history.
pub fn train_segmentation(
    mut model: SegModel,
    train: &Dataset,
    target: LesionTarget,
    cfg: &TrainConfig,
    val: Option<&Dataset>,
) -> Result<(SegModel, History), SegError> {
    cfg.validate()?;
    let kinds = model_kinds(&model, target)?;
    let size = model.config.input_size;
    let (images, masks) = prepare_inputs(train, size, Some(&kinds))?;
    let masks = masks.expect("masks requested");
    let val_inputs = match val {
        Some(v) => Some(prepare_inputs(v, size, Some(&kinds))?),
        None => None,
    };
    let mut history = History::default();
    let auto = channel_pos_weights(&masks);
    for (c, kind) in kinds.iter().enumerate() {
        if (0..masks.n()).all(|s| masks.plane(s, c).iter().all(|&v| v <= 0.5)) {
            let msg = format!("no positive {kind} pixels in the training set");
            log::warn!("{msg}");
            history.warnings.push(msg);
        }
    }
    let pos_weight = match cfg.pos_weight {
        Some(w) => vec![w; kinds.len()],
        None => auto,
    };
    let mut opt = Optimizer::new(cfg.optimizer_config());
    let n = images.n();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut indexed(cfg.seed, "seg-order", epoch as u64));
        let mut weighted = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = gather(&images, batch);
            let y = gather(&masks, batch);
            let loss = seg_step(&mut model, &mut opt, x, &y, &pos_weight, cfg.dice_weight)?;
            weighted += loss * batch.len() as f64;
        }
        let val_dice = match &val_inputs {
            Some((vx, vy)) => {
                let probs = model.predict(vx, 8)?;
                Some(mean_dice(&probs, vy.as_ref().expect("masks requested"))?)
            }
            None => None,
        };
        let row = HistoryRow {
            epoch: epoch + 1,
            loss: weighted / n as f64,
            val_dice,
        };
        log::debug!("seg epoch {} loss {:.5}", row.epoch, row.loss);
        history.rows.push(row);
    }
    Ok((model, history))
}

fn nan_on_degenerate(r: Result<f64, MetricError>) -> Result<f64, MetricError> {
    match r {
        Err(MetricError::DegenerateLabels(_)) => Ok(f64::NAN),
        other => other,
    }
}

/// Dice (threshold 0.5), pooled AUC-ROC, pooled AUC-PR and MAE per lesion.
/// A ranking metric is NaN when the test masks hold only one class.
pub fn evaluate_segmentation(model: &SegModel, test: &Dataset, target: LesionTarget) -> Result<MetricReport, SegError> {
    let kinds = model_kinds(model, target)?;
    let (images, masks) = prepare_inputs(test, model.config.input_size, Some(&kinds))?;
    let masks = masks.expect("masks requested");
    let probs = model.predict(&images, 8)?;
    let wanted = target.kinds();
    let mut rows = Vec::new();
    for (c, kind) in kinds.iter().enumerate() {
        if !wanted.contains(kind) {
            continue;
        }
        let (p, g) = channel_values(&probs, &masks, c);
        rows.push((
            kind.name().to_string(),
            SegScores {
                dice: metrics::dice(&p, &g, 0.5)?,
                auc_roc: nan_on_degenerate(metrics::auc_roc(&p, &g))?,
                auc_pr: nan_on_degenerate(metrics::auc_pr(&p, &g))?,
                mae: metrics::mae(&p, &g)?,
            },
        ));
    }
    Ok(MetricReport::Segmentation(rows))
}

/// Binarise `p >= threshold`.
pub(crate) fn binarize(plane: &[f32], threshold: f64, width: usize) -> Mask {
    Mask {
        width,
        height: plane.len() / width,
        data: plane.iter().map(|&v| f64::from(v) >= threshold).collect(),
    }
}

/// Write `<dir>/<LESION>/<id>.png` binary masks (`p >= threshold`) and a
/// colour overlay `<dir>/overlay/<id>.png` per sample. Masks are at the
/// model's input resolution.
pub fn export_masks(
    model: &SegModel,
    dataset: &Dataset,
    target: LesionTarget,
    threshold: f64,
    dir: &Path,
) -> Result<Vec<PathBuf>, SegError> {
    let kinds = model_kinds(model, target)?;
    let size = model.config.input_size;
    let (images, _) = prepare_inputs(dataset, size, None)?;
    let probs = model.predict(&images, 8)?;
    let io = |p: &Path, e: std::io::Error| {
        SegError::Data(DataError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        })
    };
    let overlay_dir = dir.join("overlay");
    fs::create_dir_all(&overlay_dir).map_err(|e| io(&overlay_dir, e))?;
    let mut written = Vec::new();
    for (i, sample) in dataset.samples.iter().enumerate() {
        let planar = images.sample(i);
        let mut overlay = crate::data::RgbImage::new(size, size);
        let plane = size * size;
        for p in 0..plane {
            overlay.set(
                p % size,
                p / size,
                [planar[p], planar[plane + p], planar[2 * plane + p]],
            );
        }
        for (c, kind) in kinds.iter().enumerate() {
            let mask = binarize(probs.plane(i, c), threshold, size);
            let kdir = dir.join(kind.name());
            fs::create_dir_all(&kdir).map_err(|e| io(&kdir, e))?;
            let path = kdir.join(format!("{}.png", sample.id));
            write_mask_png(&mask, &path)?;
            written.push(path);
            let color = kind.color().map(|v| f32::from(v) / 255.0);
            for (p, &on) in mask.data.iter().enumerate() {
                if on {
                    overlay.set(p % size, p / size, color);
                }
            }
        }
        let path = overlay_dir.join(format!("{}.png", sample.id));
        write_rgb_png(&overlay, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: SegModelConfig,
    seed: u64,
}

const CHECKPOINT_KIND: &str = "segmentation";

/// Single-file checkpoint: parameters plus the config and seed.
pub fn save_checkpoint(model: &SegModel, path: &Path) -> Result<(), SegError> {
    let meta = CheckpointMeta {
        kind: CHECKPOINT_KIND.into(),
        config: model.config.clone(),
        seed: model.seed,
    };
    archive::write(path, &meta, &[&model.store])?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SegModel, SegError> {
    let (meta, stores): (CheckpointMeta, _) = archive::read(path, 1)?;
    if meta.kind != CHECKPOINT_KIND {
        return Err(SegError::InvalidConfig(format!(
            "{} holds a {} checkpoint",
            path.display(),
            meta.kind
        )));
    }
    let mut model = build_segmentation_model(&meta.config, meta.seed)?;
    model
        .store
        .copy_values_from(&stores[0])
        .map_err(SegError::InvalidConfig)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_phantom, LesionDensity, PhantomSpec};
    use crate::segnet::{SegModelConfig, SegVariant};

    fn phantom(n: usize, size: usize) -> Dataset {
        let spec = PhantomSpec::empty(n, size, 4)
            .with(LesionKind::EX, LesionDensity::new(1, 2, 2.0, 3.0))
            .with(LesionKind::MA, LesionDensity::new(1, 2, 1.0, 1.5));
        synthesize_phantom(&spec).unwrap().0
    }

    fn small(variant: SegVariant) -> SegModel {
        build_segmentation_model(&SegModelConfig::new(variant, 2, 4, 32), 1).unwrap()
    }

    #[test]
    fn zero_epochs_leaves_parameters() {
        let ds = phantom(2, 32);
        let model = small(SegVariant::Plain);
        let before = model.store.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (after, hist) = train_segmentation(model, &ds, LesionTarget::One(LesionKind::EX), &cfg, None).unwrap();
        assert_eq!(after.store, before);
        assert!(hist.rows.is_empty());
    }

    #[test]
    fn training_descends_and_is_reproducible() {
        let ds = phantom(4, 32);
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 2,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let run =
            || train_segmentation(small(SegVariant::Multiclass), &ds, LesionTarget::All, &cfg, Some(&ds)).unwrap();
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(a.store, b.store);
        assert_eq!(ha, hb);
        assert!(ha.rows.last().unwrap().loss < ha.rows[0].loss);
        assert!(ha.rows.iter().all(|r| r.val_dice.is_some()));
        // SE/HE/IRMA/NV are never planted here
        assert_eq!(ha.warnings.len(), 4);
    }

    #[test]
    fn evaluation_layout_and_degenerate_case() {
        let ds = phantom(2, 32);
        let model = small(SegVariant::Multiclass);
        let rep = evaluate_segmentation(&model, &ds, LesionTarget::All).unwrap();
        let MetricReport::Segmentation(rows) = &rep else {
            panic!("wrong report kind")
        };
        let names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["MA", "HE", "EX", "SE", "IRMA", "NV"]);
        assert!(rows[1].1.auc_roc.is_nan());
        assert!(rows[0].1.auc_roc.is_finite());
        let one = evaluate_segmentation(&model, &ds, LesionTarget::One(LesionKind::EX)).unwrap();
        assert_eq!(one.entries().len(), 4);
        assert!(evaluate_segmentation(&small(SegVariant::Plain), &ds, LesionTarget::All).is_err());
    }

    #[test]
    fn export_round_trip_and_thresholds() {
        let ds = phantom(2, 32);
        let model = small(SegVariant::Plain);
        let target = LesionTarget::One(LesionKind::MA);
        let dir = tempfile::tempdir().unwrap();
        export_masks(&model, &ds, target, 0.25, dir.path()).unwrap();
        let (x, _) = prepare_inputs(&ds, 32, None).unwrap();
        let probs = model.predict(&x, 8).unwrap();
        for (i, s) in ds.samples.iter().enumerate() {
            let path = dir.path().join("MA").join(format!("{}.png", s.id));
            let loaded = crate::data::read_mask_png(&path).unwrap();
            assert_eq!(loaded, binarize(probs.plane(i, 0), 0.25, 32));
        }
        assert!(!binarize(probs.plane(0, 0), 1.0, 32).any());
        assert_eq!(binarize(probs.plane(0, 0), 0.0, 32).count(), 1024);
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = small(SegVariant::Attention);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rk");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.store, model.store);
        assert_eq!(back.config, model.config);
    }
}
