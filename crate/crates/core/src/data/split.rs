use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{DataError, Dataset};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

/// `folds`-fold partition; stratified by grade when every sample has one.
///
/// Samples are grouped by grade (one group when ungraded), each group is
/// shuffled from the `split` substream, and the concatenated groups are
/// dealt round-robin so fold sizes and per-grade counts differ by at most
/// one. Train/test keep the dataset's original order.
pub fn split_dataset(dataset: &Dataset, folds: usize, seed: u64) -> Result<Vec<Split>, DataError> {
    if folds < 2 || dataset.len() < folds {
        return Err(DataError::TooFewSamples {
            folds: folds.max(2),
            have: dataset.len(),
        });
    }
    let stratify = dataset.samples.iter().all(|s| s.grade.is_some());
    let mut groups: BTreeMap<Option<u8>, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        let key = if stratify { s.grade } else { None };
        groups.entry(key).or_default().push(i);
    }
    let mut rng = substream(seed, "split", &format!("{folds}"));
    let mut assignment = vec![0usize; dataset.len()];
    let mut cursor = 0usize;
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            assignment[i] = cursor % folds;
            cursor += 1;
        }
    }
    Ok((0..folds)
        .map(|f| {
            let test: Vec<usize> = (0..dataset.len()).filter(|&i| assignment[i] == f).collect();
            let train: Vec<usize> = (0..dataset.len()).filter(|&i| assignment[i] != f).collect();
            Split {
                train: dataset.subset(&train, &format!("{}-fold{f}-train", dataset.name)),
                test: dataset.subset(&test, &format!("{}-fold{f}-test", dataset.name)),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::data::{DatasetKind, FundusSample, RgbImage};

    fn dataset(grades: &[Option<u8>]) -> Dataset {
        Dataset {
            name: "d".into(),
            kind: DatasetKind::Phantom,
            samples: grades
                .iter()
                .enumerate()
                .map(|(i, &g)| FundusSample {
                    id: format!("s{i}"),
                    image: RgbImage::new(1, 1),
                    lesion_masks: None,
                    lesion_flags: None,
                    grade: g,
                    disease_labels: None,
                })
                .collect(),
        }
    }

    fn ids(d: &Dataset) -> BTreeSet<String> {
        d.samples.iter().map(|s| s.id.clone()).collect()
    }

    #[test]
    fn two_fold_four_samples() {
        let ds = dataset(&[None; 4]);
        let splits = split_dataset(&ds, 2, 3).unwrap();
        assert_eq!(splits.len(), 2);
        assert!(splits.iter().all(|s| s.test.len() == 2 && s.train.len() == 2));
        let a = ids(&splits[0].test);
        let b = ids(&splits[1].test);
        assert!(a.is_disjoint(&b));
        assert_eq!(a.union(&b).count(), 4);
    }

    #[test]
    fn stratified_by_grade() {
        let mut grades = vec![Some(0); 5];
        grades.extend([Some(4); 5]);
        let ds = dataset(&grades);
        for seed in 0..20 {
            for split in split_dataset(&ds, 2, seed).unwrap() {
                for g in [0, 4] {
                    let c = split.test.samples.iter().filter(|s| s.grade == Some(g)).count();
                    assert!(c == 2 || c == 3, "seed {seed}: grade {g} has {c}");
                }
            }
        }
    }

    #[test]
    fn deterministic_and_errors() {
        let ds = dataset(&[Some(1), Some(2), Some(1), Some(3), Some(0)]);
        assert_eq!(split_dataset(&ds, 2, 9).unwrap(), split_dataset(&ds, 2, 9).unwrap());
        assert!(matches!(split_dataset(&ds, 6, 0), Err(DataError::TooFewSamples { .. })));
        assert!(split_dataset(&ds, 1, 0).is_err());
    }
}
