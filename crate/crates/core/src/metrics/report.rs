//! Metric reports and their two text encodings: a key/value listing (one
//! metric per line, fixed key order) and a tab-separated table row in the
//! column layout of the published result tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub dice: f64,
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradingScores {
    pub accuracy: f64,
    pub qw_kappa: f64,
    /// `confusion[gt][pred]` counts.
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub accuracy: f64,
    pub kappa: f64,
    pub f1: f64,
    pub auc_roc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiLabelScores {
    pub kappa: f64,
    pub f1: f64,
    pub auc_roc: f64,
    pub per_label: Vec<(String, LabelScores)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MetricReport {
    Segmentation(Vec<(String, SegScores)>),
    Grading(GradingScores),
    MultiLabel(MultiLabelScores),
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ReportParseError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("report has no kind line")]
    MissingKind,
    #[error("report is missing key {0}")]
    MissingKey(String),
}

impl MetricReport {
    pub fn kind(&self) -> &'static str {
        match self {
            MetricReport::Segmentation(_) => "segmentation",
            MetricReport::Grading(_) => "grading",
            MetricReport::MultiLabel(_) => "multilabel",
        }
    }

    /// Every scalar in the report, in serialization order.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        match self {
            MetricReport::Segmentation(rows) => {
                for (key, s) in rows {
                    out.push((format!("{key}.dice"), s.dice));
                    out.push((format!("{key}.auc_roc"), s.auc_roc));
                    out.push((format!("{key}.auc_pr"), s.auc_pr));
                    out.push((format!("{key}.mae"), s.mae));
                }
            }
            MetricReport::Grading(g) => {
                out.push(("accuracy".into(), g.accuracy));
                out.push(("qw_kappa".into(), g.qw_kappa));
                for (i, row) in g.confusion.iter().enumerate() {
                    for (j, &c) in row.iter().enumerate() {
                        out.push((format!("confusion.{i}.{j}"), c as f64));
                    }
                }
            }
            MetricReport::MultiLabel(m) => {
                out.push(("kappa".into(), m.kappa));
                out.push(("f1".into(), m.f1));
                out.push(("auc_roc".into(), m.auc_roc));
                for (label, s) in &m.per_label {
                    out.push((format!("{label}.accuracy"), s.accuracy));
                    out.push((format!("{label}.kappa"), s.kappa));
                    out.push((format!("{label}.f1"), s.f1));
                    out.push((format!("{label}.auc_roc"), s.auc_roc));
                }
            }
        }
        out
    }

    /// `kind\t<kind>` followed by one `key\tvalue` line per metric.
    pub fn to_text(&self) -> String {
        let mut s = format!("kind\t{}\n", self.kind());
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}\t{v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ReportParseError> {
        let mut kind = None;
        let mut pairs: Vec<(String, f64)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('\t').ok_or_else(|| ReportParseError::Syntax {
                line: i + 1,
                message: "expected key<TAB>value".into(),
            })?;
            if k == "kind" {
                kind = Some(v.to_string());
                continue;
            }
            let value: f64 = v.parse().map_err(|_| ReportParseError::Syntax {
                line: i + 1,
                message: format!("not a number: {v}"),
            })?;
            pairs.push((k.to_string(), value));
        }
        let get = |key: &str| -> Result<f64, ReportParseError> {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| ReportParseError::MissingKey(key.to_string()))
        };
        // Prefixes in first-seen order give the row order back.
        let prefixes = |suffix: &str| -> Vec<String> {
            let mut seen = Vec::new();
            for (k, _) in &pairs {
                if let Some(p) = k.strip_suffix(suffix) {
                    if !seen.iter().any(|s: &String| s == p) {
                        seen.push(p.to_string());
                    }
                }
            }
            seen
        };
        match kind.as_deref() {
            Some("segmentation") => {
                let mut rows = Vec::new();
                for key in prefixes(".dice") {
                    rows.push((
                        key.clone(),
                        SegScores {
                            dice: get(&format!("{key}.dice"))?,
                            auc_roc: get(&format!("{key}.auc_roc"))?,
                            auc_pr: get(&format!("{key}.auc_pr"))?,
                            mae: get(&format!("{key}.mae"))?,
                        },
                    ));
                }
                Ok(MetricReport::Segmentation(rows))
            }
            Some("grading") => {
                let k = pairs.iter().filter(|(key, _)| key.starts_with("confusion.")).count();
                let side = (k as f64).sqrt().round() as usize;
                let mut confusion = vec![vec![0u64; side]; side];
                for (i, row) in confusion.iter_mut().enumerate() {
                    for (j, c) in row.iter_mut().enumerate() {
                        *c = get(&format!("confusion.{i}.{j}"))? as u64;
                    }
                }
                Ok(MetricReport::Grading(GradingScores {
                    accuracy: get("accuracy")?,
                    qw_kappa: get("qw_kappa")?,
                    confusion,
                }))
            }
            Some("multilabel") => {
                let mut per_label = Vec::new();
                for label in prefixes(".accuracy") {
                    per_label.push((
                        label.clone(),
                        LabelScores {
                            accuracy: get(&format!("{label}.accuracy"))?,
                            kappa: get(&format!("{label}.kappa"))?,
                            f1: get(&format!("{label}.f1"))?,
                            auc_roc: get(&format!("{label}.auc_roc"))?,
                        },
                    ));
                }
                Ok(MetricReport::MultiLabel(MultiLabelScores {
                    kappa: get("kappa")?,
                    f1: get("f1")?,
                    auc_roc: get("auc_roc")?,
                    per_label,
                }))
            }
            Some(other) => Err(ReportParseError::Syntax {
                line: 1,
                message: format!("unknown report kind {other}"),
            }),
            None => Err(ReportParseError::MissingKind),
        }
    }

    /// Header columns of the tabular layout.
    pub fn table_header(&self) -> Vec<String> {
        let mut cols = vec!["Method".to_string()];
        match self {
            MetricReport::Segmentation(rows) => {
                for (key, _) in rows {
                    for m in ["Dice", "ROC", "PR", "MAE"] {
                        cols.push(format!("{key} {m}"));
                    }
                }
            }
            MetricReport::Grading(_) => {
                cols.push("Acc.".into());
                cols.push("Q.W.Kappa".into());
            }
            MetricReport::MultiLabel(_) => {
                cols.extend(["Kappa", "F-1", "ROC"].map(String::from));
            }
        }
        cols
    }

    pub fn table_row(&self) -> Vec<f64> {
        match self {
            MetricReport::Segmentation(rows) => rows
                .iter()
                .flat_map(|(_, s)| [s.dice, s.auc_roc, s.auc_pr, s.mae])
                .collect(),
            MetricReport::Grading(g) => vec![g.accuracy, g.qw_kappa],
            MetricReport::MultiLabel(m) => vec![m.kappa, m.f1, m.auc_roc],
        }
    }

    /// Header plus one row, tab separated, values to four decimals.
    pub fn to_table(&self, method: &str) -> String {
        let mut s = self.table_header().join("\t");
        s.push('\n');
        s.push_str(method);
        for v in self.table_row() {
            let _ = write!(s, "\t{v:.4}");
        }
        s.push('\n');
        s
    }

    /// Scalars are finite; Dice/AUC in [0,1]; kappa in [-1,1].
    pub fn validate(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let kappa = |v: f64| (-1.0..=1.0).contains(&v);
        self.entries().iter().all(|(_, v)| v.is_finite())
            && match self {
                MetricReport::Segmentation(rows) => rows
                    .iter()
                    .all(|(_, s)| unit(s.dice) && unit(s.auc_roc) && unit(s.auc_pr) && unit(s.mae)),
                MetricReport::Grading(g) => unit(g.accuracy) && kappa(g.qw_kappa),
                MetricReport::MultiLabel(m) => {
                    kappa(m.kappa)
                        && unit(m.f1)
                        && unit(m.auc_roc)
                        && m.per_label.iter().all(|(_, s)| unit(s.accuracy) && kappa(s.kappa))
                }
            }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_reports() -> Vec<MetricReport> {
        vec![
            MetricReport::Segmentation(vec![
                (
                    "EX".into(),
                    SegScores {
                        dice: 0.649,
                        auc_roc: 0.978,
                        auc_pr: 0.775,
                        mae: 0.008,
                    },
                ),
                (
                    "MA".into(),
                    SegScores {
                        dice: 1.0 / 3.0,
                        auc_roc: 0.5,
                        auc_pr: 0.1,
                        mae: 0.004,
                    },
                ),
            ]),
            MetricReport::Grading(GradingScores {
                accuracy: 0.2,
                qw_kappa: -0.125,
                confusion: vec![vec![1, 2], vec![0, 3]],
            }),
            MetricReport::MultiLabel(MultiLabelScores {
                kappa: 0.7348,
                f1: 0.9426,
                auc_roc: 0.9498,
                per_label: vec![(
                    "AMD".into(),
                    LabelScores {
                        accuracy: 0.9826,
                        kappa: 0.5,
                        f1: 0.25,
                        auc_roc: 0.75,
                    },
                )],
            }),
        ]
    }

    #[test]
    fn text_round_trip() {
        for r in sample_reports() {
            let text = r.to_text();
            assert_eq!(MetricReport::from_text(&text).unwrap(), r);
        }
    }

    #[test]
    fn segmentation_table_has_lesion_columns_in_order() {
        let r = &sample_reports()[0];
        let table = r.to_table("Dense U-Net");
        let header = table.lines().next().unwrap();
        assert_eq!(
            header,
            "Method\tEX Dice\tEX ROC\tEX PR\tEX MAE\tMA Dice\tMA ROC\tMA PR\tMA MAE"
        );
        assert!(table.lines().nth(1).unwrap().starts_with("Dense U-Net\t0.6490\t0.9780"));
    }

    #[test]
    fn parse_errors_are_line_anchored() {
        let err = MetricReport::from_text("kind\tgrading\naccuracy 0.5\n").unwrap_err();
        assert_eq!(
            err,
            ReportParseError::Syntax {
                line: 2,
                message: "expected key<TAB>value".into()
            }
        );
    }
}
