//! Training objective: cross-entropy plus the load-balancing term.

use alloc::vec::Vec;

use crate::error::{DkghError, Result};
use crate::model::NetOutput;
use crate::moe::{mean_routing_probability, top1_frequency};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Scalar parts of `total = cls + λ·lb`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub cls: T,
    pub lb: T,
    pub total: T,
    pub lambda: T,
}

/// Mean cross-entropy of `logits[B,C]` against integer labels.
pub fn cross_entropy<T: Real>(tape: &mut Tape<'_, T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// `Σ_i f_i · p̄_i` for one branch.
///
/// Both vectors must be distributions (sums within 1e-6 of one).
pub fn load_balance_loss<T: Real>(frequency: &[T], mean_probability: &[T]) -> Result<T> {
    if frequency.len() != mean_probability.len() {
        return Err(DkghError::dim("load_balance_loss", &[frequency.len()], &[mean_probability.len()]));
    }
    let tol = 1e-6;
    let fs: f64 = frequency.iter().map(|v| v.as_f64()).sum();
    let ps: f64 = mean_probability.iter().map(|v| v.as_f64()).sum();
    if (fs - 1.0).abs() > tol || (ps - 1.0).abs() > tol {
        return Err(DkghError::Contract(alloc::format!(
            "load balancing needs normalized inputs, got sums {fs} and {ps}"
        )));
    }
    Ok(frequency
        .iter()
        .zip(mean_probability)
        .map(|(&f, &p)| f * p)
        .sum())
}

/// Combines the classification loss with the summed balancing terms.
pub fn total_loss<T: Real>(cls: T, lb_terms: &[T], lambda: T) -> Result<LossBreakdown<T>> {
    if !(lambda >= T::zero()) {
        return Err(DkghError::Config(alloc::format!("lambda must be >= 0, got {lambda}")));
    }
    let lb = lb_terms.iter().copied().fold(T::zero(), |a, b| a + b);
    Ok(LossBreakdown {
        cls,
        lb,
        total: cls + lambda * lb,
        lambda,
    })
}

/// Differentiable objective for one batch.
#[derive(Debug, Clone)]
pub struct Objective<T> {
    pub total: Var,
    pub breakdown: LossBreakdown<T>,
    /// Balancing term per (block, branch), data-driven before domain-expert.
    pub lb_terms: Vec<T>,
    /// Top-1 usage frequencies, aligned with `lb_terms`.
    pub frequencies: Vec<Vec<T>>,
}

/// Builds `CE + λ·Σ_blocks Σ_branches Σ_i f_i·p̄_i` on the tape.
///
/// `f` enters as a constant for the step; gradients flow through `p̄`.
pub fn objective<T: Real>(
    tape: &mut Tape<'_, T>,
    output: &NetOutput,
    labels: &[usize],
    lambda: T,
) -> Result<Objective<T>> {
    let cls = cross_entropy(tape, output.logits, labels)?;
    let mut lb_vars = Vec::new();
    let mut lb_terms = Vec::new();
    let mut frequencies = Vec::new();
    for block in &output.blocks {
        for branch in [&block.dd, &block.de] {
            let n = tape.shape(branch.routing.scores)[1];
            let f: Vec<T> = top1_frequency(&branch.routing, n);
            let p_mean = mean_routing_probability(tape, branch.routing.scores)?;
            let fv = tape.constant(Tensor::new(&[n], f.clone())?);
            let prod = tape.mul(p_mean, fv)?;
            let term = tape.sum(prod)?;
            lb_terms.push(tape.value(term).data()[0]);
            lb_vars.push(term);
            frequencies.push(f);
        }
    }
    let cls_value = tape.value(cls).data()[0];
    let breakdown = total_loss(cls_value, &lb_terms, lambda)?;
    let total = match lb_vars.split_first() {
        None => cls,
        Some((&first, rest)) => {
            let mut lb = first;
            for &v in rest {
                lb = tape.add(lb, v)?;
            }
            let weighted = tape.scale(lb, lambda)?;
            tape.add(cls, weighted)?
        }
    };
    Ok(Objective {
        total,
        breakdown,
        lb_terms,
        frequencies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_balance_examples() {
        assert_eq!(load_balance_loss(&[0.25f64; 4], &[0.25; 4]).unwrap(), 0.25);
        assert_eq!(
            load_balance_loss(&[1.0f64, 0., 0., 0.], &[1.0, 0., 0., 0.]).unwrap(),
            1.0
        );
        let v = load_balance_loss(&[0.5f64, 0.5, 0., 0.], &[0.4, 0.4, 0.1, 0.1]).unwrap();
        assert!((v - 0.4).abs() < 1e-15);
    }

    #[test]
    fn unnormalized_input_rejected() {
        assert!(matches!(
            load_balance_loss(&[0.5f64, 0.4], &[0.5, 0.5]),
            Err(DkghError::Contract(_))
        ));
    }

    #[test]
    fn total_loss_examples() {
        let b = total_loss(1.3f64, &[0.25, 0.5], 0.0).unwrap();
        assert_eq!(b.total, 1.3);
        let b = total_loss(1.0f64, &[0.25, 0.25], 0.01).unwrap();
        assert!((b.total - 1.005).abs() < 1e-15);
        let b = total_loss(0.0f64, &[1.0, 1.0], 0.01).unwrap();
        assert!((b.total - 0.02).abs() < 1e-15);
        assert!(total_loss(0.0f64, &[], -1.0).is_err());
    }

    #[test]
    fn cross_entropy_saturates() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::<f64>::from_f64(&[1, 3], &[30., 0., 0.]).unwrap());
        let ce = cross_entropy(&mut tape, l, &[0]).unwrap();
        let v = tape.value(ce).data()[0];
        assert!(v >= 0.0 && v < 1e-9);
    }
}
