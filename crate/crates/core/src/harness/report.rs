use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::figures;
use super::manifest::{collect_artifacts, sha256_hex, Manifest};
use super::HarnessError;
use crate::metrics::MetricReport;

/// One finished run as seen by `report`.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub label: String,
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub report: MetricReport,
}

pub fn load_run(dir: &Path) -> Result<RunSummary, HarnessError> {
    let manifest = Manifest::read(dir)?;
    let path = dir.join("report.txt");
    let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
    let report = MetricReport::from_text(&text)?;
    let label = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| manifest.name.clone());
    Ok(RunSummary {
        label,
        dir: dir.to_path_buf(),
        manifest,
        report,
    })
}

/// Side-by-side table: the report header, one row per run. Grading
/// comparisons add `delta_kappa` (each run's kappa minus the first run's,
/// printed at full precision).
pub fn comparison_table(runs: &[RunSummary]) -> Result<String, HarnessError> {
    let first = runs
        .first()
        .ok_or_else(|| HarnessError::Config("report needs at least one run".into()))?;
    for r in runs {
        if r.report.kind() != first.report.kind() {
            return Err(HarnessError::IncompatibleReports(format!(
                "{} is {}, {} is {}",
                first.label,
                first.report.kind(),
                r.label,
                r.report.kind()
            )));
        }
        if r.report.table_header() != first.report.table_header() {
            return Err(HarnessError::IncompatibleReports(format!(
                "{} and {} report different columns",
                first.label, r.label
            )));
        }
    }
    let delta = runs.len() > 1 && matches!(first.report, MetricReport::Grading(_));
    let mut s = first.report.table_header().join("\t");
    if delta {
        s.push_str("\tdelta_kappa");
    }
    s.push('\n');
    let kappa = |r: &MetricReport| match r {
        MetricReport::Grading(g) => g.qw_kappa,
        _ => f64::NAN,
    };
    for r in runs {
        s.push_str(&r.label);
        for v in r.report.table_row() {
            let _ = write!(s, "\t{v:.4}");
        }
        if delta {
            let _ = write!(s, "\t{}", kappa(&r.report) - kappa(&first.report));
        }
        s.push('\n');
    }
    Ok(s)
}

/// Merge the runs into `out`: comparison table and figure, per-run
/// confusion heatmaps, precision-recall curves and ladder charts.
pub fn compare_runs(run_dirs: &[PathBuf], out: &Path) -> Result<Manifest, HarnessError> {
    let runs = run_dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>, _>>()?;
    let table = comparison_table(&runs)?;
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let write = |name: &str, text: &str| -> Result<(), HarnessError> {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| HarnessError::io(&p, e))
    };
    write("comparison.tsv", &table)?;
    let header: Vec<String> = runs[0].report.table_header().into_iter().skip(1).collect();
    let series: Vec<(String, Vec<f64>)> = runs.iter().map(|r| (r.label.clone(), r.report.table_row())).collect();
    write("comparison.svg", &figures::bar_chart("comparison", &header, &series))?;
    for r in &runs {
        if let MetricReport::Grading(g) = &r.report {
            write(
                &format!("confusion_{}.svg", r.label),
                &figures::confusion_heatmap(&g.confusion, &r.label),
            )?;
        }
        for (src, dst) in [("pr_curves.svg", "pr"), ("ladder.svg", "ladder")] {
            let p = r.dir.join(src);
            if p.is_file() {
                let text = fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
                write(&format!("{dst}_{}.svg", r.label), &text)?;
            }
        }
    }
    let inputs: String = runs
        .iter()
        .map(|r| format!("{}\t{}\n", r.label, r.manifest.config_sha256))
        .collect();
    let manifest = Manifest {
        tool: "retinakit".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: "report".into(),
        name: "report".into(),
        seed: 0,
        config_sha256: sha256_hex(inputs.as_bytes()),
        config: inputs,
        artifacts: collect_artifacts(out)?,
    };
    manifest.write(out)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::GradingScores;

    fn run(label: &str, kappa: f64) -> RunSummary {
        RunSummary {
            label: label.into(),
            dir: PathBuf::from(label),
            manifest: Manifest {
                tool: String::new(),
                version: String::new(),
                command: String::new(),
                name: label.into(),
                seed: 0,
                config_sha256: String::new(),
                config: String::new(),
                artifacts: Vec::new(),
            },
            report: MetricReport::Grading(GradingScores {
                accuracy: 0.5,
                qw_kappa: kappa,
                confusion: vec![vec![1, 0], vec![0, 1]],
            }),
        }
    }

    #[test]
    fn single_run_table_is_its_report_table() {
        let r = run("a", 0.61);
        assert_eq!(comparison_table(&[r.clone()]).unwrap(), r.report.to_table("a"));
    }

    #[test]
    fn delta_column_is_exact() {
        let (a, b) = (0.613, 0.7771);
        let t = comparison_table(&[run("a", a), run("b", b)]).unwrap();
        let last: f64 = t.lines().nth(2).unwrap().rsplit('\t').next().unwrap().parse().unwrap();
        assert_eq!(last, b - a);
    }

    #[test]
    fn mixed_kinds_are_rejected() {
        let mut b = run("b", 0.1);
        b.report = MetricReport::Segmentation(vec![]);
        let e = comparison_table(&[run("a", 0.1), b]).unwrap_err();
        assert!(matches!(e, HarnessError::IncompatibleReports(_)));
    }
}
