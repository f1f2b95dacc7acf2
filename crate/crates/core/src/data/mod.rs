//! Fundus datasets: in-memory types, on-disk layout, statistics, splits and
//! the deterministic phantom generator.

mod io;
pub mod phantom;
mod split;
mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::Tensor;

pub use io::{load_dataset, read_mask_png, save_dataset, MANIFEST_FILE};
pub(crate) use io::{write_mask_png, write_rgb_png};
pub use phantom::{
    grade_from_counts, synthesize_multidisease, synthesize_phantom, DiseasePhantomSpec, GradeMode, LesionDensity,
    PhantomSpec, PlantingLog, PlantingRecord, PLANTING_LOG_FILE,
};
pub use split::{split_dataset, Split};
pub use stats::{compute_statistics, DatasetStatistics};

/// The six pixel-annotated lesion kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LesionKind {
    MA,
    HE,
    EX,
    SE,
    IRMA,
    NV,
}

impl LesionKind {
    pub const ALL: [LesionKind; 6] = [
        LesionKind::MA,
        LesionKind::HE,
        LesionKind::EX,
        LesionKind::SE,
        LesionKind::IRMA,
        LesionKind::NV,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LesionKind::MA => "MA",
            LesionKind::HE => "HE",
            LesionKind::EX => "EX",
            LesionKind::SE => "SE",
            LesionKind::IRMA => "IRMA",
            LesionKind::NV => "NV",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Overlay colour used for exported masks.
    pub fn color(self) -> [u8; 3] {
        match self {
            LesionKind::MA => [0, 0, 255],
            LesionKind::HE => [0, 255, 0],
            LesionKind::EX => [0, 255, 255],
            LesionKind::SE => [255, 0, 0],
            LesionKind::IRMA => [128, 0, 128],
            LesionKind::NV => [128, 128, 0],
        }
    }
}

impl fmt::Display for LesionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LesionKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LesionKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| DataError::UnknownLesionKind {
                id: String::new(),
                name: s.to_string(),
            })
    }
}

pub const NUM_DISEASES: usize = 8;
pub const DISEASE_NAMES: [&str; NUM_DISEASES] = [
    "normal",
    "diabetes",
    "glaucoma",
    "cataract",
    "AMD",
    "hypertension",
    "myopia",
    "other",
];

pub const NUM_GRADES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct LesionFlags {
    pub lm: bool,
    pub pm: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    SegSet,
    GradeSet,
    MultiDisease,
    Phantom,
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seg-set" => Ok(DatasetKind::SegSet),
            "grade-set" => Ok(DatasetKind::GradeSet),
            "multi-disease" => Ok(DatasetKind::MultiDisease),
            "phantom" => Ok(DatasetKind::Phantom),
            other => Err(format!("unknown dataset kind {other:?}")),
        }
    }
}

/// RGB image with `f32` channels in `[0, 1]`, stored row-major HWC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Snap every channel to the nearest multiple of 1/255 so that an
    /// 8-bit PNG round trip is lossless.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    /// `[3, h, w]` planar copy.
    pub fn to_planar(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = px[c];
            }
        }
        out
    }
}

/// Binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&v| v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FundusSample {
    pub id: String,
    pub image: RgbImage,
    pub lesion_masks: Option<BTreeMap<LesionKind, Mask>>,
    pub lesion_flags: Option<LesionFlags>,
    pub grade: Option<u8>,
    pub disease_labels: Option<[bool; NUM_DISEASES]>,
}

impl FundusSample {
    /// Mask for `kind`; an absent entry reads as all-zero.
    pub fn mask(&self, kind: LesionKind) -> Mask {
        self.lesion_masks
            .as_ref()
            .and_then(|m| m.get(&kind).cloned())
            .unwrap_or_else(|| Mask::new(self.image.width, self.image.height))
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let (w, h) = (self.image.width, self.image.height);
        if let Some(masks) = &self.lesion_masks {
            for (kind, m) in masks {
                if (m.width, m.height) != (w, h) {
                    return Err(DataError::DimensionMismatch {
                        id: self.id.clone(),
                        detail: format!("{kind} mask is {}x{} but image is {w}x{h}", m.width, m.height),
                    });
                }
            }
        }
        if let Some(g) = self.grade {
            if usize::from(g) >= NUM_GRADES {
                return Err(DataError::GradeOutOfRange {
                    id: self.id.clone(),
                    grade: i64::from(g),
                });
            }
        }
        if let Some(labels) = &self.disease_labels {
            if !labels.iter().any(|&b| b) {
                return Err(DataError::Invalid {
                    id: self.id.clone(),
                    detail: "disease label vector has no set bit".into(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub kind: DatasetKind,
    pub samples: Vec<FundusSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Check per-sample invariants, id uniqueness and the label contract
    /// implied by `kind`.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = BTreeSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(DataError::DuplicateId { id: s.id.clone() });
            }
            s.validate()?;
            let missing = |what: &str| DataError::Invalid {
                id: s.id.clone(),
                detail: format!("{:?} dataset requires {what}", self.kind),
            };
            match self.kind {
                DatasetKind::SegSet => {
                    if s.lesion_masks.is_none() {
                        return Err(missing("lesion masks"));
                    }
                    if s.grade.is_none() {
                        return Err(missing("a grade"));
                    }
                }
                DatasetKind::GradeSet => {
                    if s.grade.is_none() {
                        return Err(missing("a grade"));
                    }
                }
                DatasetKind::MultiDisease => {
                    if s.disease_labels.is_none() {
                        return Err(missing("disease labels"));
                    }
                }
                DatasetKind::Phantom => {}
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize], name: &str) -> Dataset {
        Dataset {
            name: name.to_string(),
            kind: self.kind,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Images as a `[n, 3, h, w]` tensor.
    pub fn image_tensor(&self, indices: &[usize]) -> Tensor {
        let first = &self.samples[indices[0]].image;
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(indices.len() * 3 * w * h);
        for &i in indices {
            let img = &self.samples[i].image;
            assert_eq!((img.width, img.height), (w, h), "mixed image sizes in batch");
            data.extend(img.to_planar());
        }
        Tensor::from_vec([indices.len(), 3, h, w], data)
    }

    /// Masks for `kinds` as a `[n, kinds.len(), h, w]` tensor of 0/1.
    pub fn mask_tensor(&self, indices: &[usize], kinds: &[LesionKind]) -> Tensor {
        let first = &self.samples[indices[0]].image;
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(indices.len() * kinds.len() * w * h);
        for &i in indices {
            for &k in kinds {
                let m = self.samples[i].mask(k);
                data.extend(m.data.iter().map(|&b| if b { 1.0 } else { 0.0 }));
            }
        }
        Tensor::from_vec([indices.len(), kinds.len(), h, w], data)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("missing file for sample {id}: {path} ({loaded} samples loaded)")]
    MissingMaskFile { id: String, path: String, loaded: usize },
    #[error("dimension mismatch in sample {id}: {detail}")]
    DimensionMismatch { id: String, detail: String },
    #[error("unknown lesion kind {name:?} (sample {id})")]
    UnknownLesionKind { id: String, name: String },
    #[error("grade {grade} out of range 0..=4 for sample {id}")]
    GradeOutOfRange { id: String, grade: i64 },
    #[error("duplicate sample id {id}")]
    DuplicateId { id: String },
    #[error("invalid sample {id}: {detail}")]
    Invalid { id: String, detail: String },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("sample {id} has no grade")]
    MissingGrades { id: String },
    #[error("need at least {folds} samples for {folds} folds, have {have}")]
    TooFewSamples { folds: usize, have: usize },
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("cannot place {kind} lesion #{index} in image {id} within the overlap budget")]
    LesionOverflow { id: String, kind: String, index: usize },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lesion_kind_parse_and_order() {
        assert_eq!("irma".parse::<LesionKind>().unwrap(), LesionKind::IRMA);
        assert!("XX".parse::<LesionKind>().is_err());
        assert_eq!(LesionKind::ALL.map(|k| k.index()), [0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn sample_invariants() {
        let mut s = FundusSample {
            id: "a".into(),
            image: RgbImage::new(4, 4),
            lesion_masks: Some(BTreeMap::from([(LesionKind::HE, Mask::new(2, 2))])),
            lesion_flags: None,
            grade: Some(2),
            disease_labels: None,
        };
        assert!(matches!(s.validate(), Err(DataError::DimensionMismatch { .. })));
        s.lesion_masks = None;
        s.grade = Some(5);
        assert!(matches!(s.validate(), Err(DataError::GradeOutOfRange { .. })));
        s.grade = None;
        s.disease_labels = Some([false; NUM_DISEASES]);
        assert!(s.validate().is_err());
    }
}
