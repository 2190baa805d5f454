//! Evaluation metrics. All results are `f64`; accuracy and AUC are percents.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{DkghError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

fn check_table<T: Real>(scores: &Tensor<T>, labels: &[usize], op: &'static str) -> Result<usize> {
    if scores.rank() != 2 || scores.shape()[0] != labels.len() {
        return Err(DkghError::dim(op, scores.shape(), &[labels.len()]));
    }
    let classes = scores.shape()[1];
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(DkghError::Validation(alloc::format!(
            "label {l} out of range for {classes} classes"
        )));
    }
    Ok(classes)
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows<T: Real>(scores: &Tensor<T>) -> Vec<usize> {
    let classes = scores.shape()[1];
    scores
        .data()
        .chunks_exact(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, row[0]), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Percentage of rows whose argmax equals the label.
pub fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    check_table(logits, labels, "accuracy")?;
    let hits = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Binary AUC through the Mann-Whitney rank statistic (ties count one half).
///
/// Returns `None` when either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * avg;
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Macro one-vs-rest AUC over the classes present in `labels`, as a percent.
///
/// Column `c` of `scores` is the score for class `c`.
pub fn macro_auc<T: Real>(scores: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let classes = check_table(scores, labels, "macro_auc")?;
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(DkghError::UndefinedMetric(
            "AUC needs at least two distinct labels".into(),
        ));
    }
    let mut total = 0.0;
    for &c in &present {
        let col: Vec<f64> = (0..labels.len())
            .map(|r| scores.data()[r * classes + c].as_f64())
            .collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        total += binary_auc(&col, &pos).expect("class present with at least one negative");
    }
    Ok(100.0 * total / present.len() as f64)
}

/// Size-weighted mean over groups of the largest single-expert share within
/// the group: `Σ_g max_e count(g, e) / M`. One means every group sends all its
/// samples to a single expert.
pub fn routing_purity(top1: &[usize], groups: &[usize], experts: usize) -> Result<f64> {
    if top1.is_empty() || top1.len() != groups.len() {
        return Err(DkghError::dim("routing_purity", &[top1.len()], &[groups.len()]));
    }
    if let Some(&e) = top1.iter().find(|&&e| e >= experts) {
        return Err(DkghError::Validation(alloc::format!(
            "expert index {e} out of range for {experts} experts"
        )));
    }
    let mut counts: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&e, &g) in top1.iter().zip(groups) {
        counts.entry(g).or_insert_with(|| vec![0; experts])[e] += 1;
    }
    let modal: usize = counts
        .values()
        .map(|c| *c.iter().max().expect("experts >= 1"))
        .sum();
    Ok(modal as f64 / top1.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[rows, cols], v).unwrap()
    }

    #[test]
    fn accuracy_examples() {
        let t = table(4, 2, &[1., 0., 0., 1., 1., 0., 0., 1.]);
        assert_eq!(accuracy(&t, &[0, 1, 0, 1]).unwrap(), 100.0);
        assert_eq!(accuracy(&t, &[1, 0, 1, 0]).unwrap(), 0.0);
        assert_eq!(accuracy(&t, &[0, 1, 0, 0]).unwrap(), 75.0);
        // ties resolve to class 0
        assert_eq!(accuracy(&table(1, 2, &[0.5, 0.5]), &[0]).unwrap(), 100.0);
    }

    #[test]
    fn auc_examples() {
        let perfect = table(4, 2, &[0.9, 0.1, 0.8, 0.2, 0.3, 0.7, 0.1, 0.9]);
        assert_eq!(macro_auc(&perfect, &[0, 0, 1, 1]).unwrap(), 100.0);
        let flat = table(4, 3, &[0.2; 12]);
        assert_eq!(macro_auc(&flat, &[0, 1, 2, 1]).unwrap(), 50.0);
        assert!(matches!(
            macro_auc(&flat, &[1, 1, 1, 1]),
            Err(DkghError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn purity_examples() {
        assert_eq!(routing_purity(&[0, 0, 1, 1, 2], &[5, 5, 7, 7, 9], 3).unwrap(), 1.0);
        assert_eq!(routing_purity(&[0, 0, 1, 1], &[0, 0, 0, 0], 2).unwrap(), 0.5);
        assert!(routing_purity(&[3], &[0], 2).is_err());
    }
}
