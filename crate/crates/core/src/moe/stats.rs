use alloc::vec;
use alloc::vec::Vec;

use crate::error::{DkghError, Result};
use crate::moe::record::RoutingRecord;
use crate::moe::router::Routing;
use crate::real::Real;
use crate::tape::{softmax_slice, Tape, Var};

/// Inputs of the load-balancing term for one branch over one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingStats<T> {
    /// Share of samples whose top-1 expert is `i`.
    pub frequency: Vec<T>,
    /// Batch mean of the softmax over all `N` raw scores.
    pub mean_probability: Vec<T>,
}

/// Usage frequency and mean routing probability from a batch of records.
///
/// Frequencies count top-1 choices even under dense routing, and the
/// probabilities use the full `N`-way softmax even under sparse routing.
pub fn batch_routing_stats<T: Real>(records: &[RoutingRecord<T>], experts: usize) -> Result<RoutingStats<T>> {
    if records.is_empty() {
        return Err(DkghError::Contract("routing statistics need a non-empty batch".into()));
    }
    let mut counts = vec![0usize; experts];
    let mut prob = vec![T::zero(); experts];
    for r in records {
        if r.raw_scores.len() != experts || r.top1() >= experts {
            return Err(DkghError::dim("batch_routing_stats", &[r.raw_scores.len()], &[experts]));
        }
        counts[r.top1()] += 1;
        for (acc, p) in prob.iter_mut().zip(softmax_slice(&r.raw_scores)) {
            *acc += p;
        }
    }
    let inv = T::one() / T::lit(records.len() as f64);
    Ok(RoutingStats {
        frequency: counts.iter().map(|&c| T::lit(c as f64) * inv).collect(),
        mean_probability: prob.into_iter().map(|p| p * inv).collect(),
    })
}

/// Top-1 usage frequency straight from a tape routing decision.
pub fn top1_frequency<T: Real>(routing: &Routing, experts: usize) -> Vec<T> {
    let batch = routing.batch();
    let mut counts = vec![0usize; experts];
    for b in 0..batch {
        counts[routing.selected(b)[0]] += 1;
    }
    let inv = T::one() / T::lit(batch as f64);
    counts.iter().map(|&c| T::lit(c as f64) * inv).collect()
}

/// Differentiable `[N]` batch mean of `softmax(scores)` over all experts.
pub fn mean_routing_probability<T: Real>(tape: &mut Tape<'_, T>, scores: Var) -> Result<Var> {
    let probs = tape.softmax(scores, 1)?;
    tape.mean_rows(probs)
}
