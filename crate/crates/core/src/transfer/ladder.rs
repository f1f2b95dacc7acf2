use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::loss::LossWeights;
use super::model::{build_source_branch, build_transfer_system, Ablation, TransferConfig, TransferSystem};
use super::train::{evaluate_multidisease, pretrain_defaults, pretrain_source, train_joint, JointConfig, JointHistory};
use super::TransferError;
use crate::data::Dataset;
use crate::metrics::{MetricReport, MultiLabelScores};
use crate::segnet::{History, TrainConfig};

/// Everything needed to run the ablation ladder on one pair of domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderConfig {
    pub model: TransferConfig,
    pub pretrain: TrainConfig,
    pub joint: JointConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_rungs")]
    pub rungs: Vec<Ablation>,
    #[serde(default)]
    pub seed: u64,
}

fn default_rungs() -> Vec<Ablation> {
    Ablation::LADDER.to_vec()
}

impl LadderConfig {
    pub fn new(model: TransferConfig, seed: u64) -> Self {
        Self {
            model,
            pretrain: pretrain_defaults(seed),
            joint: JointConfig {
                seed,
                ..JointConfig::default()
            },
            weights: LossWeights::default(),
            rungs: default_rungs(),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RungResult {
    pub ablation: Ablation,
    pub scores: MultiLabelScores,
    pub history: JointHistory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LadderResult {
    pub pretrain: History,
    pub rungs: Vec<RungResult>,
}

impl LadderResult {
    pub fn rung(&self, ablation: Ablation) -> Option<&RungResult> {
        self.rungs.iter().find(|r| r.ablation == ablation)
    }

    /// One row per rung: method, kappa, F-1, AUC.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("method\tkappa\tf1\tauc\n");
        for r in &self.rungs {
            let _ = writeln!(
                s,
                "{}\t{:.4}\t{:.4}\t{:.4}",
                r.ablation.label(),
                r.scores.kappa,
                r.scores.f1,
                r.scores.auc_roc
            );
        }
        s
    }

    /// One row per rung and disease.
    pub fn per_disease_tsv(&self) -> String {
        let mut s = String::from("method\tdisease\taccuracy\tkappa\tf1\tauc\n");
        for r in &self.rungs {
            for (name, l) in &r.scores.per_label {
                let _ = writeln!(
                    s,
                    "{}\t{name}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                    r.ablation.label(),
                    l.accuracy,
                    l.kappa,
                    l.f1,
                    l.auc_roc
                );
            }
        }
        s
    }
}

/// Pretrains one source branch, then trains and evaluates every rung from
/// copies of it. All rungs share the seed, so their target branches start
/// from the same values wherever their layouts agree.
pub fn run_ladder(
    source_train: &Dataset,
    target_train: &Dataset,
    target_test: &Dataset,
    cfg: &LadderConfig,
) -> Result<LadderResult, TransferError> {
    run_ladder_with(source_train, target_train, target_test, cfg, |_, _| Ok(()))
}

/// [`run_ladder`], handing each trained system to `visit` before it is
/// dropped.
pub fn run_ladder_with<F>(
    source_train: &Dataset,
    target_train: &Dataset,
    target_test: &Dataset,
    cfg: &LadderConfig,
    mut visit: F,
) -> Result<LadderResult, TransferError>
where
    F: FnMut(&TransferSystem, &RungResult) -> Result<(), TransferError>,
{
    cfg.model.validate()?;
    if cfg.rungs.is_empty() {
        return Err(TransferError::InvalidConfig("no ablation rungs requested".into()));
    }
    let source = build_source_branch(&cfg.model, cfg.seed)?;
    let (source, pretrain) = pretrain_source(source, source_train, &cfg.pretrain)?;
    let mut rungs = Vec::with_capacity(cfg.rungs.len());
    for &ablation in &cfg.rungs {
        let mut system = build_transfer_system(&cfg.model, ablation, cfg.seed)?;
        system.source = source.clone();
        let (system, history) = train_joint(system, source_train, target_train, cfg.weights, &cfg.joint)?;
        let MetricReport::MultiLabel(scores) = evaluate_multidisease(&system, target_test)? else {
            unreachable!("multi-disease evaluation yields a multi-label report")
        };
        log::info!(
            "{}: kappa {:.4} f1 {:.4} auc {:.4}",
            ablation.label(),
            scores.kappa,
            scores.f1,
            scores.auc_roc
        );
        let rung = RungResult {
            ablation,
            scores,
            history,
        };
        visit(&system, &rung)?;
        rungs.push(rung);
    }
    Ok(LadderResult { pretrain, rungs })
}
