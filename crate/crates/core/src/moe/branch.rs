use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{DkghError, Result};
use crate::moe::router::{route, Router, Routing};
use crate::nn::{join, Module, ResidualBasicBlock};
use crate::real::Real;
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `N` same-shaped experts, each with its own parameters.
#[derive(Debug, Clone)]
pub struct ExpertBank<T> {
    pub experts: Vec<ResidualBasicBlock<T>>,
}

impl<T: Real> ExpertBank<T> {
    pub fn new(
        count: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut SeedRng,
    ) -> Self {
        ExpertBank {
            experts: (0..count)
                .map(|_| ResidualBasicBlock::new(in_channels, out_channels, stride, rng))
                .collect(),
        }
    }

    pub fn from_experts(experts: Vec<ResidualBasicBlock<T>>) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| DkghError::Config("an expert bank needs at least one expert".into()))?;
        let key = (first.in_channels(), first.out_channels(), first.stride());
        for e in &experts {
            if (e.in_channels(), e.out_channels(), e.stride()) != key || e.projection.is_some() != first.projection.is_some() {
                return Err(DkghError::Config("experts must share one architecture".into()));
            }
        }
        Ok(ExpertBank { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }
}

impl<T: Real> Module<T> for ExpertBank<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, e) in self.experts.iter().enumerate() {
            e.visit(&join(prefix, &format!("{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("{i}")), f);
        }
    }
}

/// Router, experts and the number of experts activated per sample.
#[derive(Debug, Clone)]
pub struct MoeBranch<T> {
    pub router: Router<T>,
    pub experts: ExpertBank<T>,
    pub k: usize,
}

/// Result of one branch forward.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    /// Mixed expert output, same shape as a single expert's output.
    pub h: Var,
    pub routing: Routing,
    /// Number of (expert, sample) evaluations performed.
    pub expert_evals: usize,
}

impl<T: Real> MoeBranch<T> {
    pub fn new(router: Router<T>, experts: ExpertBank<T>, k: usize) -> Result<Self> {
        if router.experts() != experts.len() {
            return Err(DkghError::Config(format!(
                "router scores {} experts but the bank holds {}",
                router.experts(),
                experts.len()
            )));
        }
        if k == 0 || k > experts.len() {
            return Err(DkghError::Config(format!(
                "top-k needs 1 <= k <= N, got k = {k}, N = {}",
                experts.len()
            )));
        }
        Ok(MoeBranch { router, experts, k })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// `h[b] = Σ_{j ∈ top-k(b)} w[b,j] · E_j(x[b])`.
    ///
    /// Each expert runs once on exactly the samples that selected it; experts
    /// nobody selected are not evaluated and stay off the tape.
    pub fn forward<'p>(&'p self, tape: &mut Tape<'p, T>, x: Var, feature: Var) -> Result<BranchOutput> {
        let batch = tape.shape(x)[0];
        if tape.shape(feature)[0] != batch {
            return Err(DkghError::dim("branch_forward", tape.shape(x), tape.shape(feature)));
        }
        let routing = route(tape, &self.router, feature, self.k)?;
        let k = self.k;
        let mut parts = Vec::new();
        let mut row_shape: Option<Vec<usize>> = None;
        let mut evals = 0;
        for (j, expert) in self.experts.experts.iter().enumerate() {
            let mut rows = Vec::new();
            let mut slots = Vec::new();
            for (pos, &e) in routing.indices.iter().enumerate() {
                if e == j {
                    rows.push(pos / k);
                    slots.push(pos);
                }
            }
            if rows.is_empty() {
                continue;
            }
            evals += rows.len();
            let n = rows.len();
            let sub = tape.select_rows(x, rows.clone())?;
            let y = expert.forward(tape, sub)?;
            let w = tape.take(routing.weights, slots, &[n])?;
            let yw = tape.mul_rows(y, w)?;
            row_shape.get_or_insert_with(|| tape.shape(yw)[1..].to_vec());
            parts.push((yw, rows));
        }
        let row_shape = row_shape.expect("every sample selects at least one expert");
        let h = tape.scatter_rows(batch, &row_shape, parts)?;
        Ok(BranchOutput {
            h,
            routing,
            expert_evals: evals,
        })
    }
}

impl<T: Real> Module<T> for MoeBranch<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.router.visit(&join(prefix, "router"), f);
        self.experts.visit(&join(prefix, "experts"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.router.visit_mut(&join(prefix, "router"), f);
        self.experts.visit_mut(&join(prefix, "experts"), f);
    }
}
