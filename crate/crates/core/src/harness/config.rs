use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use super::HarnessError;
use crate::data::{DatasetKind, GradeMode};
use crate::grading::{GradeModelConfig, GradeTrainConfig};
use crate::segnet::{SegModelConfig, TrainConfig};
use crate::transfer::{Ablation, JointConfig, LossWeights, TransferConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Synth,
    Stats,
    Seg,
    Grade,
    Transfer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    /// Lesion phantom with masks and grades.
    Phantom,
    /// Multi-disease phantom with disease labels.
    DiseasePhantom,
    /// A dataset in the standard on-disk layout.
    Directory,
}

fn default_images() -> usize {
    8
}
fn default_size() -> usize {
    64
}

/// Where one dataset comes from. Phantom seeds are derived from the
/// experiment seed and the dataset's role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub source: SourceKind,
    #[serde(default = "default_images")]
    pub num_images: usize,
    #[serde(default = "default_size")]
    pub image_size: usize,
    #[serde(default)]
    pub grade_mode: GradeMode,
    #[serde(default)]
    pub lm_probability: f64,
    #[serde(default)]
    pub pm_probability: f64,
    pub root: Option<PathBuf>,
    pub kind: Option<DatasetKind>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<DataSource>,
    pub test: Option<DataSource>,
    /// Source domain of a transfer run.
    pub source: Option<DataSource>,
    /// With no test set, hold out fold 0 of this many folds.
    pub holdout_folds: Option<usize>,
}

fn default_lesion() -> String {
    "all".into()
}
fn default_threshold() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegSection {
    pub model: SegModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// `all` or a lesion name.
    #[serde(default = "default_lesion")]
    pub lesion: String,
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub export_masks: bool,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradeSection {
    pub model: GradeModelConfig,
    #[serde(default)]
    pub train: GradeTrainConfig,
    /// Segmentation checkpoint feeding a fused model.
    pub seg_checkpoint: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    pub model: TransferConfig,
    pub pretrain: Option<TrainConfig>,
    #[serde(default)]
    pub joint: JointConfig,
    #[serde(default)]
    pub weights: LossWeights,
    /// Rung labels such as `B+MTC`; all four when absent.
    pub rungs: Option<Vec<String>>,
    pub checkpoint: Option<PathBuf>,
}

/// One experiment. `include` files are merged before this is parsed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seed: u64,
    pub name: Option<String>,
    #[serde(default)]
    pub data: DataConfig,
    pub seg: Option<SegSection>,
    pub grade: Option<GradeSection>,
    pub transfer: Option<TransferSection>,
}

impl ExperimentConfig {
    pub fn seg(&self) -> Result<&SegSection, HarnessError> {
        self.seg.as_ref().ok_or_else(|| missing("seg"))
    }

    pub fn grade(&self) -> Result<&GradeSection, HarnessError> {
        self.grade.as_ref().ok_or_else(|| missing("grade"))
    }

    pub fn transfer(&self) -> Result<&TransferSection, HarnessError> {
        self.transfer.as_ref().ok_or_else(|| missing("transfer"))
    }

    pub fn train_data(&self) -> Result<&DataSource, HarnessError> {
        self.data.train.as_ref().ok_or_else(|| missing("data.train"))
    }

    pub fn rungs(&self) -> Result<Vec<Ablation>, HarnessError> {
        match &self.transfer()?.rungs {
            None => Ok(Ablation::LADDER.to_vec()),
            Some(labels) => labels
                .iter()
                .map(|l| {
                    l.parse()
                        .map_err(|e: String| HarnessError::Config(format!("transfer.rungs: {e}")))
                })
                .collect(),
        }
    }
}

fn missing(section: &str) -> HarnessError {
    HarnessError::Config(format!("missing [{section}] section"))
}

/// A parsed experiment plus the merged table it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// Canonical TOML of the merged configuration.
    pub resolved: String,
}

fn read_table(path: &Path) -> Result<Table, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

/// `over` wins; tables merge recursively.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn resolve(path: &Path, stack: &mut BTreeSet<PathBuf>) -> Result<Table, HarnessError> {
    let canon = path
        .canonicalize()
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    if !stack.insert(canon.clone()) {
        return Err(HarnessError::Config(format!("{}: include cycle", path.display())));
    }
    let mut table = read_table(path)?;
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(Value::String(s)) => vec![s],
        Some(Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => Err(HarnessError::Config(format!(
                    "{}: include entries must be strings, found {other}",
                    path.display()
                ))),
            })
            .collect::<Result<_, _>>()?,
        Some(other) => {
            return Err(HarnessError::Config(format!(
                "{}: include must be a string or array, found {other}",
                path.display()
            )))
        }
    };
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut merged = Table::new();
    for inc in includes {
        merge(&mut merged, resolve(&dir.join(inc), stack)?);
    }
    merge(&mut merged, table);
    stack.remove(&canon);
    Ok(merged)
}

/// Parse `key.path=value`; the value is read as a TOML literal, falling
/// back to a bare string.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, Value), HarnessError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(HarnessError::Config(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<(), HarnessError> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for (i, p) in parents.iter().enumerate() {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(HarnessError::Config(format!(
                    "override {}: {} is not a table",
                    path.join("."),
                    path[..=i].join(".")
                )))
            }
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Load `path` with its includes, apply `overrides`, and validate.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<LoadedConfig, HarnessError> {
    let mut table = resolve(path, &mut BTreeSet::new())?;
    for spec in overrides {
        let (key, value) = parse_override(spec)?;
        set_path(&mut table, &key, value)?;
    }
    let resolved = toml::to_string(&table).map_err(|e| HarnessError::Config(e.to_string()))?;
    // parsing the canonical text keeps line numbers in schema errors
    let config: ExperimentConfig = toml::from_str(&resolved)
        .map_err(|e| HarnessError::Config(format!("{} (resolved configuration):\n{e}", path.display())))?;
    validate(&config)?;
    Ok(LoadedConfig { config, resolved })
}

/// Same as [`load_config`] for text already in memory (manifests).
pub fn load_config_text(text: &str) -> Result<LoadedConfig, HarnessError> {
    let table: Table = text.parse().map_err(|e| HarnessError::Config(format!("{e}")))?;
    let resolved = toml::to_string(&table).map_err(|e| HarnessError::Config(e.to_string()))?;
    let config: ExperimentConfig = toml::from_str(&resolved).map_err(|e| HarnessError::Config(format!("{e}")))?;
    validate(&config)?;
    Ok(LoadedConfig { config, resolved })
}

fn validate(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let check_source = |name: &str, s: &DataSource| -> Result<(), HarnessError> {
        match s.source {
            SourceKind::Directory if s.root.is_none() || s.kind.is_none() => Err(HarnessError::Config(format!(
                "data.{name}: a directory source needs root and kind"
            ))),
            SourceKind::Phantom | SourceKind::DiseasePhantom if s.num_images == 0 => Err(HarnessError::Config(
                format!("data.{name}: num_images must be positive"),
            )),
            _ => Ok(()),
        }
    };
    for (name, s) in [
        ("train", &cfg.data.train),
        ("test", &cfg.data.test),
        ("source", &cfg.data.source),
    ] {
        if let Some(s) = s {
            check_source(name, s)?;
        }
    }
    match cfg.task {
        Task::Synth => {
            let s = cfg.train_data()?;
            if s.source == SourceKind::Directory {
                return Err(HarnessError::Config(
                    "synth needs a phantom source in data.train".into(),
                ));
            }
        }
        Task::Stats => {
            cfg.train_data()?;
        }
        Task::Seg => {
            let s = cfg.seg()?;
            s.model
                .validate()
                .map_err(|e| HarnessError::Config(format!("seg.model: {e}")))?;
            s.train
                .validate()
                .map_err(|e| HarnessError::Config(format!("seg.train: {e}")))?;
            s.lesion
                .parse::<crate::segnet::LesionTarget>()
                .map_err(|e| HarnessError::Config(format!("seg.lesion: {e}")))?;
        }
        Task::Grade => {
            let g = cfg.grade()?;
            g.model
                .validate()
                .map_err(|e| HarnessError::Config(format!("grade.model: {e}")))?;
            g.train
                .validate()
                .map_err(|e| HarnessError::Config(format!("grade.train: {e}")))?;
        }
        Task::Transfer => {
            let t = cfg.transfer()?;
            t.model
                .validate()
                .map_err(|e| HarnessError::Config(format!("transfer.model: {e}")))?;
            t.joint
                .validate()
                .map_err(|e| HarnessError::Config(format!("transfer.joint: {e}")))?;
            t.weights
                .validate()
                .map_err(|e| HarnessError::Config(format!("transfer.weights: {e}")))?;
            cfg.rungs()?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    const SEG: &str = r#"
task = "seg"
seed = 3
[data.train]
source = "phantom"
[seg.model]
variant = "dense"
depth = 2
base_channels = 4
input_size = 32
out_channels = 6
"#;

    #[test]
    fn includes_merge_and_overrides_win() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "base.toml", SEG);
        let top = write(
            dir.path(),
            "top.toml",
            "include = \"base.toml\"\nseed = 5\n[seg.train]\nepochs = 2\n",
        );
        let l = load_config(&top, &["seg.train.learning_rate=0.5".into(), "name=run-a".into()]).unwrap();
        assert_eq!(l.config.seed, 5);
        assert_eq!(l.config.seg().unwrap().train.epochs, 2);
        assert_eq!(l.config.seg().unwrap().train.learning_rate, 0.5);
        assert_eq!(l.config.name.as_deref(), Some("run-a"));
        assert_eq!(l.config.seg().unwrap().model.depth, 2);
        let again = load_config_text(&l.resolved).unwrap();
        assert_eq!(again.config, l.config);
        assert_eq!(again.resolved, l.resolved);
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "bad.toml", "task = \"seg\"\nseed = 1\n[seg.model\nx = 1\n");
        let e = load_config(&p, &[]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("line 3"), "{e}");
    }

    #[test]
    fn schema_errors_and_missing_seed() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.toml", "task = \"seg\"\n");
        assert!(load_config(&p, &[]).unwrap_err().to_string().contains("seed"));
        let p = write(dir.path(), "b.toml", &format!("{SEG}\nbogus = 1\n"));
        assert!(load_config(&p, &[]).is_err());
        let p = write(dir.path(), "c.toml", "task = \"grade\"\nseed = 1\n");
        assert!(load_config(&p, &[]).unwrap_err().to_string().contains("[grade]"));
    }

    #[test]
    fn include_cycles_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "x.toml", "include = \"y.toml\"\n");
        let y = write(dir.path(), "y.toml", "include = \"x.toml\"\n");
        assert!(load_config(&y, &[]).unwrap_err().to_string().contains("cycle"));
    }

    #[test]
    fn override_values() {
        assert_eq!(parse_override("a.b=3").unwrap().1, Value::Integer(3));
        assert_eq!(parse_override("a=hello").unwrap().1, Value::String("hello".into()));
        assert_eq!(parse_override("a=\"x y\"").unwrap().1, Value::String("x y".into()));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }
}
