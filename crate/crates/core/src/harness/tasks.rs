use std::fs;
use std::path::{Path, PathBuf};

use rand::RngCore;

use super::config::{DataSource, ExperimentConfig, LoadedConfig, SourceKind, Task};
use super::figures;
use super::manifest::{collect_artifacts, sha256_hex, Manifest, MANIFEST_FILE};
use super::HarnessError;
use crate::data::{
    compute_statistics, load_dataset, save_dataset, split_dataset, synthesize_multidisease, synthesize_phantom,
    Dataset, DiseasePhantomSpec, LesionKind, PhantomSpec, PlantingLog, NUM_GRADES,
};
use crate::grading::{
    build_grading_model, confusion_percent_to_tsv, confusion_to_tsv, grading_scores, load_grading_checkpoint,
    predictions_to_tsv, save_grading_checkpoint, train_grading, Fusion, GradeModel,
};
use crate::metrics::{self, MetricReport, MultiLabelScores};
use crate::rng::substream;
use crate::segnet::{
    build_segmentation_model, evaluate_segmentation, export_masks, load_checkpoint, prepare_inputs, save_checkpoint,
    train_segmentation, LesionTarget, SegModel,
};
use crate::transfer::{
    evaluate_multidisease, load_transfer_checkpoint, pretrain_defaults, run_ladder_with, save_transfer_checkpoint,
    Ablation, JointConfig, LadderConfig, LadderResult,
};

/// The operations behind the command-line subcommands.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Synth,
    Stats,
    TrainSeg,
    EvalSeg,
    TrainGrade,
    EvalGrade,
    TrainTransfer,
    EvalTransfer,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Stats => "stats",
            Command::TrainSeg => "train-seg",
            Command::EvalSeg => "eval-seg",
            Command::TrainGrade => "train-grade",
            Command::EvalGrade => "eval-grade",
            Command::TrainTransfer => "train-transfer",
            Command::EvalTransfer => "eval-transfer",
        }
    }

    /// What `run` does for a config's task.
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Synth => Command::Synth,
            Task::Stats => Command::Stats,
            Task::Seg => Command::TrainSeg,
            Task::Grade => Command::TrainGrade,
            Task::Transfer => Command::TrainTransfer,
        }
    }
}

fn put(out: &Path, name: &str, text: &str) -> Result<(), HarnessError> {
    let path = out.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))
}

/// An output directory must be new, empty, or a previous run (whose
/// listed artifacts are removed first).
fn prepare_output(out: &Path) -> Result<(), HarnessError> {
    if out.is_dir() {
        let mut entries = fs::read_dir(out).map_err(|e| HarnessError::io(out, e))?;
        if entries.next().is_some() {
            let previous = Manifest::read(out).map_err(|_| {
                HarnessError::Config(format!(
                    "output directory {} is not empty and holds no run manifest",
                    out.display()
                ))
            })?;
            for a in &previous.artifacts {
                let p = out.join(&a.path);
                if p.is_file() {
                    fs::remove_file(&p).map_err(|e| HarnessError::io(&p, e))?;
                }
            }
            let _ = fs::remove_file(out.join(MANIFEST_FILE));
        }
    }
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))
}

/// Run `cmd` into `out` and write the manifest.
pub fn execute(
    cmd: Command,
    loaded: &LoadedConfig,
    out: &Path,
    checkpoint: Option<&Path>,
) -> Result<Manifest, HarnessError> {
    prepare_output(out)?;
    let cfg = &loaded.config;
    log::info!("{} -> {}", cmd.name(), out.display());
    match cmd {
        Command::Synth => synth(cfg, out)?,
        Command::Stats => stats(cfg, out)?,
        Command::TrainSeg => train_seg(cfg, out)?,
        Command::EvalSeg => eval_seg(cfg, out, checkpoint)?,
        Command::TrainGrade => train_grade(cfg, out)?,
        Command::EvalGrade => eval_grade(cfg, out, checkpoint)?,
        Command::TrainTransfer => train_transfer(cfg, out)?,
        Command::EvalTransfer => eval_transfer(cfg, out, checkpoint)?,
    }
    let manifest = Manifest {
        tool: "retinakit".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cmd.name().into(),
        name: run_name(cfg),
        seed: cfg.seed,
        config_sha256: sha256_hex(loaded.resolved.as_bytes()),
        config: loaded.resolved.clone(),
        artifacts: collect_artifacts(out)?,
    };
    manifest.write(out)?;
    Ok(manifest)
}

pub fn run_name(cfg: &ExperimentConfig) -> String {
    cfg.name.clone().unwrap_or_else(|| {
        match cfg.task {
            Task::Synth => "synth",
            Task::Stats => "stats",
            Task::Seg => "seg",
            Task::Grade => "grade",
            Task::Transfer => "transfer",
        }
        .into()
    })
}

/// Phantom seed for a dataset role, drawn from the experiment seed.
fn data_seed(seed: u64, role: &str) -> u64 {
    substream(seed, "data", role).next_u64()
}

pub fn load_source(s: &DataSource, seed: u64, role: &str) -> Result<(Dataset, Option<PlantingLog>), HarnessError> {
    match s.source {
        SourceKind::Phantom => {
            let spec = PhantomSpec {
                grade_mode: s.grade_mode,
                lm_probability: s.lm_probability,
                pm_probability: s.pm_probability,
                ..PhantomSpec::standard(s.num_images, s.image_size, data_seed(seed, role))
            };
            let (ds, log) = synthesize_phantom(&spec)?;
            Ok((ds, Some(log)))
        }
        SourceKind::DiseasePhantom => {
            let spec = DiseasePhantomSpec::new(s.num_images, s.image_size, data_seed(seed, role));
            let (ds, log) = synthesize_multidisease(&spec)?;
            Ok((ds, Some(log)))
        }
        SourceKind::Directory => {
            let root = s.root.as_deref().expect("validated");
            Ok((load_dataset(root, s.kind.expect("validated"))?, None))
        }
    }
}

/// Training data and, when configured, a held-out test set.
fn train_test(cfg: &ExperimentConfig) -> Result<(Dataset, Option<Dataset>), HarnessError> {
    let (train, _) = load_source(cfg.train_data()?, cfg.seed, "train")?;
    if let Some(t) = &cfg.data.test {
        return Ok((train, Some(load_source(t, cfg.seed, "test")?.0)));
    }
    if let Some(k) = cfg.data.holdout_folds {
        let split = split_dataset(&train, k, cfg.seed)?.swap_remove(0);
        return Ok((split.train, Some(split.test)));
    }
    Ok((train, None))
}

/// The evaluation set: the test data, else the training data.
fn eval_set(cfg: &ExperimentConfig) -> Result<Dataset, HarnessError> {
    let (train, test) = train_test(cfg)?;
    Ok(test.unwrap_or(train))
}

fn synth(cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    let src = cfg.train_data()?;
    let (ds, log) = load_source(src, cfg.seed, "train")?;
    let root = out.join("dataset");
    save_dataset(&ds, &root)?;
    if let Some(log) = log {
        log.write(&root)?;
        if src.source == SourceKind::Phantom {
            put(out, "statistics.tsv", &log.statistics()?.to_tsv())?;
        }
    }
    Ok(())
}

fn stats(cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    let (ds, _) = load_source(cfg.train_data()?, cfg.seed, "train")?;
    let st = compute_statistics(&ds)?;
    put(out, "statistics.tsv", &st.to_tsv())?;
    let groups: Vec<String> = LesionKind::ALL.iter().map(|k| k.name().to_string()).collect();
    let series: Vec<(String, Vec<f64>)> = (0..NUM_GRADES as u8)
        .map(|g| {
            let v = LesionKind::ALL
                .iter()
                .map(|&k| {
                    st.lesions_per_grade_normalized
                        .get(&(g, k))
                        .copied()
                        .unwrap_or(f64::NAN)
                })
                .collect();
            (format!("grade {g}"), v)
        })
        .collect();
    put(
        out,
        "lesions_per_grade.svg",
        &figures::bar_chart("fraction of images with each lesion, per grade", &groups, &series),
    )?;
    Ok(())
}

fn seg_kinds(model: &SegModel, target: LesionTarget) -> Vec<LesionKind> {
    if model.config.out_channels == 1 {
        target.kinds()
    } else {
        LesionKind::ALL.to_vec()
    }
}

fn seg_outputs(cfg: &ExperimentConfig, model: &SegModel, data: &Dataset, out: &Path) -> Result<(), HarnessError> {
    let sec = cfg.seg()?;
    let target: LesionTarget = sec.lesion.parse().map_err(HarnessError::Config)?;
    let report = evaluate_segmentation(model, data, target)?;
    put(out, "report.txt", &report.to_text())?;
    put(out, "table.tsv", &report.to_table(&run_name(cfg)))?;
    let kinds = seg_kinds(model, target);
    let (images, masks) = prepare_inputs(data, model.config.input_size, Some(&kinds))?;
    let masks = masks.expect("masks requested");
    let probs = model.predict(&images, 8)?;
    let mut curves = Vec::new();
    for (c, kind) in kinds.iter().enumerate() {
        if !target.kinds().contains(kind) {
            continue;
        }
        let mut p = Vec::new();
        let mut g = Vec::new();
        for s in 0..probs.n() {
            p.extend(probs.plane(s, c).iter().map(|&v| f64::from(v)));
            g.extend(masks.plane(s, c).iter().map(|&v| v > 0.5));
        }
        match metrics::pr_curve(&p, &g) {
            Ok(points) => curves.push((kind.name().to_string(), points)),
            Err(metrics::MetricError::DegenerateLabels(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    put(
        out,
        "pr_curves.svg",
        &figures::line_chart("precision-recall", "recall", "precision", &curves),
    )?;
    if sec.export_masks {
        export_masks(model, data, target, sec.threshold, &out.join("masks"))?;
    }
    Ok(())
}

fn loss_curve(rows: impl Iterator<Item = (usize, f64)>) -> Vec<(String, Vec<(f64, f64)>)> {
    vec![("loss".to_string(), rows.map(|(e, l)| (e as f64, l)).collect())]
}

fn train_seg(cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    let sec = cfg.seg()?;
    let target: LesionTarget = sec.lesion.parse().map_err(HarnessError::Config)?;
    let tc = crate::segnet::TrainConfig {
        seed: cfg.seed,
        ..sec.train.clone()
    };
    let model = build_segmentation_model(&sec.model, cfg.seed)?;
    let (train, test) = train_test(cfg)?;
    let (model, history) = train_segmentation(model, &train, target, &tc, test.as_ref())?;
    save_checkpoint(&model, &out.join("model.ckpt"))?;
    put(out, "history.tsv", &history.to_tsv())?;
    put(
        out,
        "loss.svg",
        &figures::line_chart(
            "training loss",
            "epoch",
            "loss",
            &loss_curve(history.rows.iter().map(|r| (r.epoch, r.loss))),
        ),
    )?;
    seg_outputs(cfg, &model, test.as_ref().unwrap_or(&train), out)
}

fn checkpoint_path(flag: Option<&Path>, section: &Option<PathBuf>, what: &str) -> Result<PathBuf, HarnessError> {
    flag.map(Path::to_path_buf)
        .or_else(|| section.clone())
        .ok_or_else(|| HarnessError::Config(format!("no checkpoint: pass --checkpoint or set {what}.checkpoint")))
}

fn eval_seg(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<&Path>) -> Result<(), HarnessError> {
    let path = checkpoint_path(checkpoint, &cfg.seg()?.checkpoint, "seg")?;
    let model = load_checkpoint(&path)?;
    seg_outputs(cfg, &model, &eval_set(cfg)?, out)
}

fn grade_outputs(cfg: &ExperimentConfig, model: &GradeModel, data: &Dataset, out: &Path) -> Result<(), HarnessError> {
    let preds = model.predict(data)?;
    let truth = data
        .samples
        .iter()
        .map(|s| {
            s.grade.ok_or_else(|| {
                HarnessError::Grade(crate::grading::GradeError::MissingLabels {
                    id: s.id.clone(),
                    what: "a grade".into(),
                })
            })
        })
        .collect::<Result<Vec<u8>, _>>()?;
    let pred: Vec<u8> = preds.iter().map(|p| p.grade).collect();
    let scores = grading_scores(&pred, &truth)?;
    let ids: Vec<String> = data.samples.iter().map(|s| s.id.clone()).collect();
    put(out, "predictions.tsv", &predictions_to_tsv(&ids, &preds))?;
    put(out, "confusion.tsv", &confusion_to_tsv(&scores.confusion))?;
    put(
        out,
        "confusion_percent.tsv",
        &confusion_percent_to_tsv(&scores.confusion),
    )?;
    put(
        out,
        "confusion.svg",
        &figures::confusion_heatmap(&scores.confusion, &run_name(cfg)),
    )?;
    let report = MetricReport::Grading(scores);
    put(out, "report.txt", &report.to_text())?;
    put(out, "table.tsv", &report.to_table(&run_name(cfg)))?;
    Ok(())
}

fn train_grade(cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    let sec = cfg.grade()?;
    let seg = match (&sec.seg_checkpoint, sec.model.fusion) {
        (Some(p), _) => Some(load_checkpoint(p)?),
        (None, Fusion::None) => None,
        (None, _) => {
            return Err(HarnessError::Config(
                "grade.seg_checkpoint is required for a fused model".into(),
            ))
        }
    };
    let model = build_grading_model(&sec.model, cfg.seed, seg)?;
    let tc = crate::grading::GradeTrainConfig {
        seed: cfg.seed,
        ..sec.train.clone()
    };
    let (train, test) = train_test(cfg)?;
    let (model, history) = train_grading(model, &train, &tc, test.as_ref())?;
    save_grading_checkpoint(&model, &out.join("model.ckpt"))?;
    put(out, "history.tsv", &history.to_tsv())?;
    put(
        out,
        "loss.svg",
        &figures::line_chart(
            "training loss",
            "epoch",
            "loss",
            &loss_curve(history.rows.iter().map(|r| (r.epoch, r.loss))),
        ),
    )?;
    grade_outputs(cfg, &model, test.as_ref().unwrap_or(&train), out)
}

fn eval_grade(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<&Path>) -> Result<(), HarnessError> {
    let path = checkpoint_path(checkpoint, &cfg.grade()?.checkpoint, "grade")?;
    let model = load_grading_checkpoint(&path)?;
    grade_outputs(cfg, &model, &eval_set(cfg)?, out)
}

/// File-name form of a rung label.
pub fn rung_slug(a: Ablation) -> String {
    a.label().to_ascii_lowercase().replace('+', "-")
}

fn multilabel_outputs(name: &str, scores: &MultiLabelScores, out: &Path) -> Result<(), HarnessError> {
    let report = MetricReport::MultiLabel(scores.clone());
    put(out, "report.txt", &report.to_text())?;
    put(out, "table.tsv", &report.to_table(name))?;
    Ok(())
}

pub fn ladder_figure(result: &LadderResult) -> String {
    let groups: Vec<String> = result.rungs.iter().map(|r| r.ablation.label().to_string()).collect();
    let pick = |f: fn(&MultiLabelScores) -> f64| result.rungs.iter().map(|r| f(&r.scores)).collect::<Vec<_>>();
    figures::bar_chart(
        "ablation ladder",
        &groups,
        &[
            ("Kappa".into(), pick(|s| s.kappa)),
            ("F-1".into(), pick(|s| s.f1)),
            ("ROC".into(), pick(|s| s.auc_roc)),
        ],
    )
}

fn train_transfer(cfg: &ExperimentConfig, out: &Path) -> Result<(), HarnessError> {
    let sec = cfg.transfer()?;
    let source_data = cfg
        .data
        .source
        .as_ref()
        .ok_or_else(|| HarnessError::Config("missing [data.source] section".into()))?;
    let (source, _) = load_source(source_data, cfg.seed, "source")?;
    let (train, test) = train_test(cfg)?;
    let test = test.unwrap_or_else(|| train.clone());
    let lc = LadderConfig {
        model: sec.model.clone(),
        pretrain: crate::segnet::TrainConfig {
            seed: cfg.seed,
            ..sec.pretrain.clone().unwrap_or_else(|| pretrain_defaults(cfg.seed))
        },
        joint: JointConfig {
            seed: cfg.seed,
            ..sec.joint.clone()
        },
        weights: sec.weights,
        rungs: cfg.rungs()?,
        seed: cfg.seed,
    };
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| HarnessError::io(&ckpt_dir, e))?;
    let mut write_err = None;
    let result = run_ladder_with(&source, &train, &test, &lc, |system, rung| {
        let slug = rung_slug(rung.ablation);
        save_transfer_checkpoint(system, lc.weights, "joint", &ckpt_dir.join(format!("{slug}.ckpt")))?;
        if let Err(e) = put(out, &format!("history_{slug}.tsv"), &rung.history.to_tsv()) {
            write_err = Some(e);
        }
        Ok(())
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    put(out, "pretrain_history.tsv", &result.pretrain.to_tsv())?;
    put(out, "ladder.tsv", &result.to_tsv())?;
    put(out, "per_disease.tsv", &result.per_disease_tsv())?;
    put(out, "ladder.svg", &ladder_figure(&result))?;
    let last = result.rungs.last().expect("at least one rung");
    multilabel_outputs(&run_name(cfg), &last.scores, out)
}

fn eval_transfer(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<&Path>) -> Result<(), HarnessError> {
    let path = checkpoint_path(checkpoint, &cfg.transfer()?.checkpoint, "transfer")?;
    let (system, _, _) = load_transfer_checkpoint(&path)?;
    let MetricReport::MultiLabel(scores) = evaluate_multidisease(&system, &eval_set(cfg)?)? else {
        unreachable!("multi-disease evaluation yields a multi-label report")
    };
    let single = LadderResult {
        pretrain: Default::default(),
        rungs: vec![crate::transfer::RungResult {
            ablation: system.ablation,
            scores: scores.clone(),
            history: Default::default(),
        }],
    };
    put(out, "per_disease.tsv", &single.per_disease_tsv())?;
    multilabel_outputs(&run_name(cfg), &scores, out)
}
