use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{build_grading_model, GradeModel, GradeModelConfig, GradePrediction};
use super::GradeError;
use crate::data::{Dataset, NUM_GRADES};
use crate::metrics::{self, GradingScores, MetricError, MetricReport};
use crate::nn::archive;
use crate::nn::{Graph, Mode, Optimizer, OptimizerConfig, OptimizerKind, Tensor};
use crate::rng::indexed;
use crate::segnet::{build_segmentation_model, SegModelConfig};

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
fn default_lm_pm_weight() -> f64 {
    0.5
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradeTrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f32,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    /// Weight of the laser-mark / membrane BCE term.
    #[serde(default = "default_lm_pm_weight")]
    pub lm_pm_weight: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for GradeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            optimizer: default_optimizer(),
            momentum: default_momentum(),
            lm_pm_weight: default_lm_pm_weight(),
            seed: 0,
        }
    }
}

impl GradeTrainConfig {
    pub fn validate(&self) -> Result<(), GradeError> {
        if self.batch_size == 0 {
            return Err(GradeError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GradeError::InvalidConfig(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(self.lm_pm_weight >= 0.0 && self.lm_pm_weight.is_finite()) {
            return Err(GradeError::InvalidConfig(format!(
                "lm_pm_weight {} must be non-negative",
                self.lm_pm_weight
            )));
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

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn sigmoid64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Grading loss terms and gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradeLoss {
    pub total: f64,
    pub cross_entropy: f64,
    pub aux_bce: f64,
    /// d total / d logits, `n x 5`.
    pub d_logits: Vec<f64>,
    /// d total / d aux logits, `n x 2`.
    pub d_aux: Option<Vec<f64>>,
}

/// Mean softmax cross-entropy over `grades`, plus `lm_pm_weight` times the
/// mean BCE of `aux` logits (`n x 2`) against `flags`.
pub fn grade_loss(logits: &[f64], grades: &[u8], aux: Option<(&[f64], &[[bool; 2]])>, lm_pm_weight: f64) -> GradeLoss {
    let n = grades.len();
    let mut d_logits = vec![0.0; logits.len()];
    let mut ce = 0.0;
    for (s, &y) in grades.iter().enumerate() {
        let z = &logits[s * NUM_GRADES..(s + 1) * NUM_GRADES];
        let lse = log_sum_exp(z);
        ce += lse - z[y as usize];
        for k in 0..NUM_GRADES {
            let p = (z[k] - lse).exp();
            let t = if k == y as usize { 1.0 } else { 0.0 };
            d_logits[s * NUM_GRADES + k] = (p - t) / n as f64;
        }
    }
    ce /= n as f64;
    let (aux_bce, d_aux) = match aux {
        Some((a, flags)) => {
            let count = (2 * n) as f64;
            let mut bce = 0.0;
            let mut d = vec![0.0; a.len()];
            for (s, f) in flags.iter().enumerate() {
                for j in 0..2 {
                    let z = a[s * 2 + j];
                    let y = if f[j] { 1.0 } else { 0.0 };
                    bce += y * softplus(-z) + (1.0 - y) * softplus(z);
                    d[s * 2 + j] = lm_pm_weight * (sigmoid64(z) - y) / count;
                }
            }
            (bce / count, Some(d))
        }
        None => (0.0, None),
    };
    GradeLoss {
        total: ce + lm_pm_weight * aux_bce,
        cross_entropy: ce,
        aux_bce,
        d_logits,
        d_aux,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeHistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub val_kappa: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradeHistory {
    pub rows: Vec<GradeHistoryRow>,
}

impl GradeHistory {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tloss\tval_kappa\n");
        for r in &self.rows {
            let v = r.val_kappa.map_or_else(|| "NA".to_string(), |v| v.to_string());
            let _ = writeln!(s, "{}\t{}\t{}", r.epoch, r.loss, v);
        }
        s
    }
}

fn grades_of(dataset: &Dataset) -> Result<Vec<u8>, GradeError> {
    dataset
        .samples
        .iter()
        .map(|s| {
            s.grade.ok_or_else(|| GradeError::MissingLabels {
                id: s.id.clone(),
                what: "grade".into(),
            })
        })
        .collect()
}

fn flags_of(dataset: &Dataset) -> Result<Vec<[bool; 2]>, GradeError> {
    dataset
        .samples
        .iter()
        .map(|s| {
            s.lesion_flags
                .map(|f| [f.lm, f.pm])
                .ok_or_else(|| GradeError::MissingLabels {
                    id: s.id.clone(),
                    what: "laser-mark / membrane flags".into(),
                })
        })
        .collect()
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| f64::from(v)).collect()
}

fn to_tensor(dims: [usize; 4], v: &[f64]) -> Tensor {
    Tensor::from_vec(dims, v.iter().map(|&x| x as f32).collect())
}

/// Train `model` for `cfg.epochs` epochs; the frozen segmentation network
/// is run once up front. `val`, when given, adds a kappa column.
pub fn train_grading(
    mut model: GradeModel,
    train: &Dataset,
    cfg: &GradeTrainConfig,
    val: Option<&Dataset>,
) -> Result<(GradeModel, GradeHistory), GradeError> {
    cfg.validate()?;
    let grades = grades_of(train)?;
    let use_aux = model.aux.is_some() && cfg.lm_pm_weight > 0.0;
    let flags = if model.aux.is_some() {
        Some(flags_of(train)?)
    } else {
        None
    };
    let inputs = model.prepare(train)?;
    let val_inputs = match val {
        Some(v) => Some((model.prepare(v)?, grades_of(v)?)),
        None => None,
    };
    let mut opt = Optimizer::new(cfg.optimizer_config());
    let mut history = GradeHistory::default();
    let n = inputs.len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut indexed(cfg.seed, "grade-order", epoch as u64));
        let mut weighted = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let b = inputs.gather(batch);
            let by: Vec<u8> = batch.iter().map(|&i| grades[i]).collect();
            let bf: Option<Vec<[bool; 2]>> = flags.as_ref().map(|f| batch.iter().map(|&i| f[i]).collect());
            let mut g = Graph::new();
            let x = g.input(b.images);
            let sf = b.seg_features.map(|t| g.input(t));
            let out = model.forward(&mut g, x, sf, Mode::Train)?;
            let logits = to_f64(g.value(out.logits));
            let aux_vals = out.aux.map(|a| to_f64(g.value(a)));
            let aux = match (&aux_vals, &bf) {
                (Some(a), Some(f)) if use_aux => Some((a.as_slice(), f.as_slice())),
                _ => None,
            };
            let loss = grade_loss(&logits, &by, aux, cfg.lm_pm_weight);
            let bn = batch.len();
            let mut seeds = vec![(out.logits, to_tensor([bn, NUM_GRADES, 1, 1], &loss.d_logits))];
            if let (Some(a), Some(d)) = (out.aux, &loss.d_aux) {
                seeds.push((a, to_tensor([bn, 2, 1, 1], d)));
            }
            let grads = g.backward(&seeds);
            let obs = g.take_observations();
            opt.step(&mut model.store, &grads, 1.0);
            model.store.apply_observations(&obs);
            weighted += loss.total * bn as f64;
        }
        let val_kappa = match &val_inputs {
            Some((vi, vg)) => {
                let preds: Vec<usize> = model.predict_inputs(vi)?.iter().map(|p| p.grade as usize).collect();
                let truth: Vec<usize> = vg.iter().map(|&g| g as usize).collect();
                Some(nan_on_degenerate(metrics::quadratic_weighted_kappa(
                    &preds, &truth, NUM_GRADES,
                ))?)
            }
            None => None,
        };
        let row = GradeHistoryRow {
            epoch: epoch + 1,
            loss: weighted / n as f64,
            val_kappa,
        };
        log::debug!("grade epoch {} loss {:.5}", row.epoch, row.loss);
        history.rows.push(row);
    }
    Ok((model, history))
}

fn nan_on_degenerate(r: Result<f64, MetricError>) -> Result<f64, MetricError> {
    match r {
        Err(MetricError::DegenerateAgreement) => Ok(f64::NAN),
        other => other,
    }
}

/// Accuracy, quadratic weighted kappa and confusion counts of
/// `predictions` against `truth`. Kappa is NaN when both sides hold a
/// single identical grade.
pub fn grading_scores(predictions: &[u8], truth: &[u8]) -> Result<GradingScores, GradeError> {
    let p: Vec<usize> = predictions.iter().map(|&g| g as usize).collect();
    let t: Vec<usize> = truth.iter().map(|&g| g as usize).collect();
    Ok(GradingScores {
        accuracy: metrics::accuracy(&p, &t)?,
        qw_kappa: nan_on_degenerate(metrics::quadratic_weighted_kappa(&p, &t, NUM_GRADES))?,
        confusion: metrics::confusion_matrix(&p, &t, NUM_GRADES)?,
    })
}

pub fn evaluate_grading(model: &GradeModel, test: &Dataset) -> Result<MetricReport, GradeError> {
    let truth = grades_of(test)?;
    let preds: Vec<u8> = model.predict(test)?.iter().map(|p| p.grade).collect();
    Ok(MetricReport::Grading(grading_scores(&preds, &truth)?))
}

/// One line per sample: id, five logits, grade, and LM/PM probabilities
/// (`NA` without auxiliary heads).
pub fn predictions_to_tsv(ids: &[String], predictions: &[GradePrediction]) -> String {
    let mut s = String::from("id\tlogit0\tlogit1\tlogit2\tlogit3\tlogit4\tgrade\tlm\tpm\n");
    for (id, p) in ids.iter().zip(predictions) {
        let _ = write!(s, "{id}");
        for v in p.logits {
            let _ = write!(s, "\t{v}");
        }
        let _ = write!(s, "\t{}", p.grade);
        match p.aux {
            Some([lm, pm]) => {
                let _ = writeln!(s, "\t{lm}\t{pm}");
            }
            None => s.push_str("\tNA\tNA\n"),
        }
    }
    s
}

/// Confusion counts as tab-separated rows (ground truth down, prediction
/// across).
pub fn confusion_to_tsv(m: &[Vec<u64>]) -> String {
    let mut s = String::from("gt\\pred");
    for j in 0..m.len() {
        let _ = write!(s, "\t{j}");
    }
    s.push('\n');
    for (i, row) in m.iter().enumerate() {
        let _ = write!(s, "{i}");
        for c in row {
            let _ = write!(s, "\t{c}");
        }
        s.push('\n');
    }
    s
}

pub fn confusion_percent_to_tsv(m: &[Vec<u64>]) -> String {
    let pct = metrics::row_normalized_percent(m);
    let mut s = String::from("gt\\pred");
    for j in 0..pct.len() {
        let _ = write!(s, "\t{j}");
    }
    s.push('\n');
    for (i, row) in pct.iter().enumerate() {
        let _ = write!(s, "{i}");
        for v in row {
            let _ = write!(s, "\t{v:.2}");
        }
        s.push('\n');
    }
    s
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: GradeModelConfig,
    seed: u64,
    seg: Option<(SegModelConfig, u64)>,
}

const CHECKPOINT_KIND: &str = "grading";

/// Classifier parameters, plus the frozen segmentation network when fused.
pub fn save_grading_checkpoint(model: &GradeModel, path: &Path) -> Result<(), GradeError> {
    let meta = CheckpointMeta {
        kind: CHECKPOINT_KIND.into(),
        config: model.config.clone(),
        seed: model.seed,
        seg: model.seg.as_ref().map(|s| (s.config.clone(), s.seed)),
    };
    let mut stores = vec![&model.store];
    if let Some(s) = &model.seg {
        stores.push(&s.store);
    }
    archive::write(path, &meta, &stores)?;
    Ok(())
}

pub fn load_grading_checkpoint(path: &Path) -> Result<GradeModel, GradeError> {
    let probe: (CheckpointMeta, _) = match archive::read(path, 1) {
        Ok(v) => v,
        Err(archive::ArchiveError::StoreCount { .. }) => archive::read(path, 2)?,
        Err(e) => return Err(e.into()),
    };
    let (meta, stores) = probe;
    if meta.kind != CHECKPOINT_KIND {
        return Err(GradeError::InvalidConfig(format!(
            "{} holds a {} checkpoint",
            path.display(),
            meta.kind
        )));
    }
    let seg = match &meta.seg {
        Some((cfg, seed)) => {
            let mut s = build_segmentation_model(cfg, *seed)?;
            let stored = stores
                .get(1)
                .ok_or_else(|| GradeError::InvalidConfig("checkpoint lacks the segmentation parameters".into()))?;
            s.store.copy_values_from(stored).map_err(GradeError::InvalidConfig)?;
            Some(s)
        }
        None => None,
    };
    let mut model = build_grading_model(&meta.config, meta.seed, seg)?;
    model
        .store
        .copy_values_from(&stores[0])
        .map_err(GradeError::InvalidConfig)?;
    Ok(model)
}
