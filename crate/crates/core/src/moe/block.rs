use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{DkghError, Result};
use crate::moe::branch::{BranchOutput, ExpertBank, MoeBranch};
use crate::moe::gate::FusionGate;
use crate::moe::record::{BranchKind, RoutingRecord};
use crate::moe::router::Router;
use crate::nn::{join, Module};
use crate::real::Real;
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Drop-in replacement for a residual basic block: data-driven branch,
/// gaze-routed branch and the gate that blends them.
#[derive(Debug, Clone)]
pub struct DkghBlock<T> {
    pub dd: MoeBranch<T>,
    pub de: MoeBranch<T>,
    pub gate: FusionGate<T>,
}

#[derive(Debug, Clone)]
pub struct BlockOutput {
    /// `p·h_de + (1 − p)·h_dd`.
    pub x_hat: Var,
    pub dd: BranchOutput,
    pub de: BranchOutput,
    /// `[B,1]` gate values.
    pub gate: Var,
}

impl BlockOutput {
    pub fn expert_evals(&self) -> usize {
        self.dd.expert_evals + self.de.expert_evals
    }

    /// Per-sample records for both branches, data-driven first.
    pub fn records<T: Real>(&self, tape: &Tape<'_, T>, block: usize) -> Vec<RoutingRecord<T>> {
        let gate = tape.value(self.gate).data();
        let mut out = Vec::with_capacity(2 * gate.len());
        for (sample, &p) in gate.iter().enumerate() {
            for (kind, branch) in [
                (BranchKind::DataDriven, &self.dd),
                (BranchKind::DomainExpert, &self.de),
            ] {
                let scores = tape.value(branch.routing.scores);
                let n = scores.shape()[1];
                let k = branch.routing.k;
                out.push(RoutingRecord {
                    sample,
                    block,
                    branch: kind,
                    raw_scores: scores.data()[sample * n..(sample + 1) * n].to_vec(),
                    indices: branch.routing.selected(sample).to_vec(),
                    weights: tape.value(branch.routing.weights).data()[sample * k..(sample + 1) * k].to_vec(),
                    gate: p,
                });
            }
        }
        out
    }
}

impl<T: Real> DkghBlock<T> {
    /// Hybrid block whose experts mirror a `ResidualBasicBlock(in, out, stride)`.
    ///
    /// `gaze_width` is the width of the gaze feature fed to the DE router and
    /// the gate.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        experts: usize,
        k: usize,
        gaze_width: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let dd = MoeBranch::new(
            Router::new(in_channels, experts, rng)?,
            ExpertBank::new(experts, in_channels, out_channels, stride, rng),
            k,
        )?;
        let de = MoeBranch::new(
            Router::new(gaze_width, experts, rng)?,
            ExpertBank::new(experts, in_channels, out_channels, stride, rng),
            k,
        )?;
        let gate = FusionGate::new(in_channels, gaze_width, rng);
        DkghBlock::from_parts(dd, de, gate)
    }

    pub fn from_parts(dd: MoeBranch<T>, de: MoeBranch<T>, gate: FusionGate<T>) -> Result<Self> {
        let a = &dd.experts.experts[0];
        let b = &de.experts.experts[0];
        if (a.in_channels(), a.out_channels(), a.stride()) != (b.in_channels(), b.out_channels(), b.stride()) {
            return Err(DkghError::Config("both branches need identical expert shapes".into()));
        }
        if dd.router.feature_width() != a.in_channels() {
            return Err(DkghError::Config("DD router must read the pooled block input".into()));
        }
        if gate.linear.input_width() != a.in_channels() + de.router.feature_width() {
            return Err(DkghError::Config("gate width must equal pooled input + gaze feature".into()));
        }
        Ok(DkghBlock { dd, de, gate })
    }

    pub fn num_experts(&self) -> usize {
        self.dd.num_experts()
    }

    pub fn k(&self) -> usize {
        self.dd.k
    }

    pub fn gaze_width(&self) -> usize {
        self.de.router.feature_width()
    }

    pub fn in_channels(&self) -> usize {
        self.dd.experts.experts[0].in_channels()
    }

    /// Forward for `x[B,C,H,W]` with gaze feature `x_exp[B,d]`.
    ///
    /// A missing gaze feature is an error; there is no data-driven-only
    /// fallback.
    pub fn forward<'p>(&'p self, tape: &mut Tape<'p, T>, x: Var, x_exp: Option<Var>) -> Result<BlockOutput> {
        let x_exp = x_exp.ok_or_else(|| {
            DkghError::Contract("hybrid block needs a gaze feature for every sample".into())
        })?;
        let batch = tape.shape(x)[0];
        if tape.shape(x_exp).first() != Some(&batch) {
            return Err(DkghError::Contract(alloc::format!(
                "gaze feature batch {:?} does not match input batch {batch}",
                tape.shape(x_exp)
            )));
        }
        let x_f = tape.global_avg_pool(x)?;
        let dd = self.dd.forward(tape, x, x_f)?;
        let de = self.de.forward(tape, x, x_exp)?;
        let gate = self.gate.forward(tape, x_f, x_exp)?;
        // x̂ = h_dd + p·(h_de − h_dd)
        let diff = tape.sub(de.h, dd.h)?;
        let mixed = tape.mul_rows(diff, gate)?;
        let x_hat = tape.add(dd.h, mixed)?;
        Ok(BlockOutput { x_hat, dd, de, gate })
    }
}

impl<T: Real> Module<T> for DkghBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.dd.visit(&join(prefix, "dd"), f);
        self.de.visit(&join(prefix, "de"), f);
        self.gate.visit(&join(prefix, "gate"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.dd.visit_mut(&join(prefix, "dd"), f);
        self.de.visit_mut(&join(prefix, "de"), f);
        self.gate.visit_mut(&join(prefix, "gate"), f);
    }
}
