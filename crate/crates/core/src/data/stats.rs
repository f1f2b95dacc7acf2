use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, LesionKind, NUM_GRADES};

/// Lesion and grade counts over a pixel-annotated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStatistics {
    /// Images containing at least one positive pixel of each lesion.
    pub images_per_lesion: BTreeMap<LesionKind, usize>,
    /// Image count per grade; every grade `0..=4` is present.
    pub grade_distribution: BTreeMap<u8, usize>,
    /// `(grade, lesion)` → fraction of that grade's images containing the
    /// lesion. Grades without images have no entries.
    pub lesions_per_grade_normalized: BTreeMap<(u8, LesionKind), f64>,
}

impl DatasetStatistics {
    /// Build from per-image `(grade, lesion presence)` records.
    pub fn from_presence<I>(records: I) -> Self
    where
        I: IntoIterator<Item = (u8, [bool; 6])>,
    {
        let mut images_per_lesion: BTreeMap<LesionKind, usize> = LesionKind::ALL.iter().map(|&k| (k, 0)).collect();
        let mut grade_distribution: BTreeMap<u8, usize> = (0..NUM_GRADES as u8).map(|g| (g, 0)).collect();
        let mut per_grade: BTreeMap<(u8, LesionKind), usize> = BTreeMap::new();
        for (grade, present) in records {
            *grade_distribution.entry(grade).or_default() += 1;
            for kind in LesionKind::ALL {
                let hit = present[kind.index()];
                *images_per_lesion.entry(kind).or_default() += usize::from(hit);
                *per_grade.entry((grade, kind)).or_default() += usize::from(hit);
            }
        }
        let lesions_per_grade_normalized = per_grade
            .into_iter()
            .map(|((g, k), c)| ((g, k), c as f64 / grade_distribution[&g] as f64))
            .collect();
        Self {
            images_per_lesion,
            grade_distribution,
            lesions_per_grade_normalized,
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("section\tgrade\tlesion\tvalue\n");
        for (k, c) in &self.images_per_lesion {
            s.push_str(&format!("images_per_lesion\t-\t{k}\t{c}\n"));
        }
        for (g, c) in &self.grade_distribution {
            s.push_str(&format!("grade_distribution\t{g}\t-\t{c}\n"));
        }
        for ((g, k), v) in &self.lesions_per_grade_normalized {
            s.push_str(&format!("lesions_per_grade_normalized\t{g}\t{k}\t{v}\n"));
        }
        s
    }
}

/// Lesion/grade statistics computed from the masks of `dataset`.
pub fn compute_statistics(dataset: &Dataset) -> Result<DatasetStatistics, DataError> {
    if dataset.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut records = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let grade = s.grade.ok_or_else(|| DataError::MissingGrades { id: s.id.clone() })?;
        let mut present = [false; 6];
        if let Some(masks) = &s.lesion_masks {
            for (kind, m) in masks {
                present[kind.index()] = m.any();
            }
        }
        records.push((grade, present));
    }
    Ok(DatasetStatistics::from_presence(records))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::data::{DatasetKind, FundusSample, Mask, RgbImage};

    fn sample(id: &str, grade: u8, ma: bool) -> FundusSample {
        let mut m = Mask::new(4, 4);
        if ma {
            m.set(2, 2, true);
        }
        FundusSample {
            id: id.into(),
            image: RgbImage::new(4, 4),
            lesion_masks: Some(BTreeMap::from([(LesionKind::MA, m), (LesionKind::EX, Mask::new(4, 4))])),
            lesion_flags: None,
            grade: Some(grade),
            disease_labels: None,
        }
    }

    #[test]
    fn counts_and_normalisation() {
        let ds = Dataset {
            name: "t".into(),
            kind: DatasetKind::SegSet,
            samples: vec![sample("a", 2, true), sample("b", 2, false)],
        };
        let st = compute_statistics(&ds).unwrap();
        assert_eq!(st.images_per_lesion[&LesionKind::MA], 1);
        assert_eq!(st.grade_distribution[&2], 2);
        assert_eq!(st.grade_distribution.values().sum::<usize>(), 2);
        assert_eq!(st.lesions_per_grade_normalized[&(2, LesionKind::MA)], 0.5);
        assert!(!st.lesions_per_grade_normalized.contains_key(&(0, LesionKind::MA)));
    }

    #[test]
    fn all_zero_masks() {
        let ds = Dataset {
            name: "t".into(),
            kind: DatasetKind::SegSet,
            samples: vec![sample("a", 0, false), sample("b", 3, false)],
        };
        let st = compute_statistics(&ds).unwrap();
        assert!(st.images_per_lesion.values().all(|&c| c == 0));
        assert!(st.lesions_per_grade_normalized.values().all(|&v| v == 0.0));
    }

    #[test]
    fn errors() {
        let empty = Dataset {
            name: "e".into(),
            kind: DatasetKind::SegSet,
            samples: vec![],
        };
        assert!(matches!(compute_statistics(&empty), Err(DataError::EmptyDataset)));
        let mut s = sample("a", 0, false);
        s.grade = None;
        let ds = Dataset {
            name: "t".into(),
            kind: DatasetKind::Phantom,
            samples: vec![s],
        };
        assert!(matches!(compute_statistics(&ds), Err(DataError::MissingGrades { .. })));
    }
}
