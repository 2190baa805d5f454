//! Central finite-difference verification of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;

use crate::error::{DkghError, Result};
use crate::nn::Module;
use crate::real::Real;
use crate::rng;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Perturbation for `(f(θ+ε) − f(θ−ε)) / 2ε`.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Gradients smaller than this are compared in absolute terms:
    /// `|a − n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many coordinates per tensor (all when `None`).
    pub max_coords_per_tensor: Option<usize>,
    /// Seed for choosing the sampled coordinates.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-6,
            tol: 1e-4,
            floor: 1e-6,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

/// Worst coordinate found by a check.
#[derive(Debug, Clone, PartialEq)]
pub struct Discrepancy {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst: Option<Discrepancy>,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss<T: Real, M: Module<T>, F>(model: &M, f: &mut F) -> Result<f64>
where
    F: for<'a> FnMut(&'a M, &mut Tape<'a, T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(model, &mut tape)?;
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(DkghError::Contract("gradient check needs a scalar loss".into()));
    }
    Ok(v.data()[0].as_f64())
}

/// Compares the tape gradient of `f` with central differences for every
/// trainable parameter of `model` (or a seeded sample of coordinates).
///
/// `f` must build the same scalar loss on every call; a mismatch between two
/// evaluations at the same point is reported as a contract error. Existing
/// gradients on `model` are cleared.
pub fn finite_diff_check<T: Real, M: Module<T>, F>(model: &mut M, mut f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'a> FnMut(&'a M, &mut Tape<'a, T>) -> Result<Var>,
{
    if !(cfg.eps > 0.0) {
        return Err(DkghError::Contract("finite-difference step must be positive".into()));
    }
    model.zero_grad();
    let base = {
        let mut tape = Tape::new();
        let loss = f(model, &mut tape)?;
        tape.backward(loss)?;
        tape.value(loss).data()[0].as_f64()
    };
    if eval_loss(model, &mut f)?.to_bits() != base.to_bits() {
        return Err(DkghError::Contract("loss function is not deterministic".into()));
    }

    let mut plan: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    let mut sampler = rng::stream(cfg.seed, 0x67c);
    model.visit("", &mut |name, t| {
        if !t.requires_grad() {
            return;
        }
        let grad: Vec<f64> = match t.grad() {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => alloc::vec![0.0; t.numel()],
        };
        let coords = match cfg.max_coords_per_tensor {
            Some(m) if m < t.numel() => {
                let mut c = index::sample(&mut sampler, t.numel(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..t.numel()).collect(),
        };
        plan.push((name, coords, grad));
    });

    let eps = T::lit(cfg.eps);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
        passed: true,
    };
    for (p, (name, coords, grad)) in plan.iter().enumerate() {
        for &c in coords {
            let original = nudge(model, p, c, None);
            nudge(model, p, c, Some(original + eps));
            let plus = eval_loss(model, &mut f);
            nudge(model, p, c, Some(original - eps));
            let minus = eval_loss(model, &mut f);
            nudge(model, p, c, Some(original));
            let numeric = (plus? - minus?) / (2.0 * cfg.eps);
            let err = relative_error(grad[c], numeric, cfg.floor);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Discrepancy {
                    param: name.clone(),
                    index: c,
                    analytic: grad[c],
                    numeric,
                });
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.tol;
    Ok(report)
}

/// Reads (and with `set`, overwrites) coordinate `coord` of the `param`-th
/// trainable tensor; returns the previous value.
fn nudge<T: Real, M: Module<T>>(model: &mut M, param: usize, coord: usize, set: Option<T>) -> T {
    let mut i = 0;
    let mut old = T::zero();
    model.visit_mut("", &mut |_, t| {
        if !t.requires_grad() {
            return;
        }
        if i == param {
            old = t.data()[coord];
            if let Some(v) = set {
                t.data_mut()[coord] = v;
            }
        }
        i += 1;
    });
    old
}
