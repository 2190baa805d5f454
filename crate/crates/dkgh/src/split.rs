//! Subject-wise cross-validation folds and class-balanced batch sampling.

use std::collections::BTreeSet;

use dkgh_core::rng::{self, SeedRng};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::manifest::SampleManifest;

/// Sample indices (into the manifest) on each side of one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Subjects held out in this fold.
    pub test_subjects: Vec<String>,
}

/// Partitions subjects into `k` shuffled groups whose sizes differ by at most
/// one; fold `i` tests on group `i` and trains on the rest.
pub fn subject_kfold(rows: &[SampleManifest], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let subjects: BTreeSet<&str> = rows.iter().map(|r| r.subject_id.as_str()).collect();
    let mut subjects: Vec<&str> = subjects.into_iter().collect();
    if subjects.len() < k {
        return Err(Error::Config(format!(
            "{} subjects cannot fill {k} folds",
            subjects.len()
        )));
    }
    subjects.shuffle(&mut rng::stream(seed, 0x4f1d));
    let (base, extra) = (subjects.len() / k, subjects.len() % k);
    let mut groups = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        let mut g: Vec<String> = subjects[start..start + len].iter().map(|s| s.to_string()).collect();
        g.sort();
        groups.push(g);
        start += len;
    }
    Ok(groups
        .into_iter()
        .map(|test_subjects| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..rows.len()).partition(|&i| test_subjects.iter().any(|s| *s == rows[i].subject_id));
            Fold {
                train,
                test,
                test_subjects,
            }
        })
        .collect())
}

/// Endless stream of batches: each draw picks a class uniformly, then a
/// sample of that class uniformly, with replacement.
#[derive(Debug, Clone)]
pub struct UniformClassBatches {
    by_class: Vec<Vec<usize>>,
    batch_size: usize,
    rng: SeedRng,
}

impl UniformClassBatches {
    /// `labels[i]` is the class of item `i`; yielded batches hold item
    /// indices. Every class in `0..num_classes` needs at least one item.
    pub fn new(labels: &[usize], num_classes: usize, batch_size: usize, rng: SeedRng) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class
                .get_mut(l)
                .ok_or_else(|| Error::Config(format!("label {l} outside [0, {num_classes})")))?
                .push(i);
        }
        if let Some(c) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::Config(format!("class {c} has no training samples")));
        }
        Ok(UniformClassBatches {
            by_class,
            batch_size,
            rng,
        })
    }
}

impl Iterator for UniformClassBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let batch = (0..self.batch_size)
            .map(|_| {
                let class = &self.by_class[self.rng.random_range(0..self.by_class.len())];
                class[self.rng.random_range(0..class.len())]
            })
            .collect();
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn rows(subjects: usize, per: usize) -> Vec<SampleManifest> {
        (0..subjects * per)
            .map(|i| SampleManifest {
                sample_id: format!("x{i}"),
                image_path: PathBuf::new(),
                heatmap_path: PathBuf::new(),
                label: i % 3,
                subject_id: format!("s{}", i / per),
            })
            .collect()
    }

    #[test]
    fn one_subject_per_fold() {
        let folds = subject_kfold(&rows(5, 3), 5, 0).unwrap();
        assert!(folds.iter().all(|f| f.test_subjects.len() == 1 && f.test.len() == 3));
    }

    #[test]
    fn pigeonhole_sizes() {
        let folds = subject_kfold(&rows(23, 1), 5, 9).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test_subjects.len()).collect();
        assert_eq!(sizes, vec![5, 5, 5, 4, 4]);
    }

    #[test]
    fn too_few_subjects() {
        assert!(matches!(subject_kfold(&rows(3, 2), 5, 0), Err(Error::Config(_))));
        assert!(subject_kfold(&rows(3, 2), 1, 0).is_err());
    }

    #[test]
    fn sampler_counts_and_batch_size() {
        let labels: Vec<usize> = (0..30).map(|i| usize::from(i >= 25) + usize::from(i >= 28)).collect();
        let mut s = UniformClassBatches::new(&labels, 3, 4, rng::stream(1, 0)).unwrap();
        let mut counts = [0; 3];
        for _ in 0..750 {
            let b = s.next().unwrap();
            assert_eq!(b.len(), 4);
            for i in b {
                counts[labels[i]] += 1;
            }
        }
        assert!(counts.iter().all(|&c| (900..=1100).contains(&c)), "{counts:?}");
    }

    #[test]
    fn single_class_and_empty_class() {
        let mut s = UniformClassBatches::new(&[0, 0, 0], 1, 2, rng::stream(1, 0)).unwrap();
        assert!(s.next().unwrap().iter().all(|&i| i < 3));
        assert!(UniformClassBatches::new(&[0, 0, 2], 3, 2, rng::stream(1, 0)).is_err());
    }
}
