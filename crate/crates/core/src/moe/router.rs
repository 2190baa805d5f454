use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{DkghError, Result};
use crate::nn::{Mlp, Module};
use crate::real::Real;
use crate::rng::SeedRng;
use crate::tape::{softmax_slice, Tape, Var};
use crate::tensor::Tensor;

/// Scores the `N` experts of a branch from a routing feature.
#[derive(Debug, Clone)]
pub struct Router<T> {
    pub mlp: Mlp<T>,
}

impl<T: Real> Router<T> {
    /// Two-layer MLP `d → max(8, d/2) → N`.
    pub fn new(feature_width: usize, experts: usize, rng: &mut SeedRng) -> Result<Self> {
        let hidden = Self::hidden_width(feature_width);
        Ok(Router {
            mlp: Mlp::new(&[feature_width, hidden, experts], rng)?,
        })
    }

    pub fn hidden_width(feature_width: usize) -> usize {
        (feature_width / 2).max(8)
    }

    pub fn from_mlp(mlp: Mlp<T>) -> Self {
        Router { mlp }
    }

    pub fn experts(&self) -> usize {
        self.mlp.output_width()
    }

    pub fn feature_width(&self) -> usize {
        self.mlp.input_width()
    }

    pub fn scores<'p>(&'p self, tape: &mut Tape<'p, T>, feature: Var) -> Result<Var> {
        self.mlp.forward(tape, feature)
    }
}

impl<T: Real> Module<T> for Router<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.mlp.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.mlp.visit_mut(prefix, f);
    }
}

/// Top-k choice for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection<T> {
    /// Expert indices by descending score; equal scores keep the lower index first.
    pub indices: Vec<usize>,
    /// Softmax over the selected raw scores, aligned with `indices`.
    pub weights: Vec<T>,
}

/// Indices of the `k` largest scores, highest first, ties to the lower index.
pub fn select_top_k<T: Real>(scores: &[T], k: usize) -> Result<Selection<T>> {
    if k == 0 || k > scores.len() {
        return Err(DkghError::Config(alloc::format!(
            "top-k needs 1 <= k <= N, got k = {k}, N = {}",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable: equal scores keep ascending index order
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    order.truncate(k);
    let picked: Vec<T> = order.iter().map(|&i| scores[i]).collect();
    Ok(Selection {
        weights: softmax_slice(&picked),
        indices: order,
    })
}

/// Routing decision for a batch, with the differentiable pieces on the tape.
#[derive(Debug, Clone)]
pub struct Routing {
    /// `[B, N]` raw router scores.
    pub scores: Var,
    /// `[B, k]` combination weights (softmax over the selected scores).
    pub weights: Var,
    /// Row-major `[B, k]` selected expert indices.
    pub indices: Vec<usize>,
    pub k: usize,
}

impl Routing {
    pub fn batch(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn selected(&self, sample: usize) -> &[usize] {
        &self.indices[sample * self.k..(sample + 1) * self.k]
    }
}

/// Scores `feature[B,d]`, selects the top `k` experts per sample and builds
/// their combination weights.
///
/// Selection is an index operation outside autodiff; gradients reach the
/// router only through the weights of the selected experts.
pub fn route<'p, T: Real>(
    tape: &mut Tape<'p, T>,
    router: &'p Router<T>,
    feature: Var,
    k: usize,
) -> Result<Routing> {
    let n = router.experts();
    if k == 0 || k > n {
        return Err(DkghError::Config(alloc::format!(
            "top-k needs 1 <= k <= N, got k = {k}, N = {n}"
        )));
    }
    let fshape = tape.shape(feature);
    if fshape.len() != 2 || fshape[1] != router.feature_width() {
        return Err(DkghError::dim("route", fshape, &[0, router.feature_width()]));
    }
    let scores = router.scores(tape, feature)?;
    weights_for_scores(tape, scores, k)
}

/// Top-k selection and weights for precomputed `[B, N]` scores.
pub(crate) fn weights_for_scores<T: Real>(tape: &mut Tape<'_, T>, scores: Var, k: usize) -> Result<Routing> {
    let (batch, n) = {
        let s = tape.shape(scores);
        (s[0], s[1])
    };
    let mut indices = Vec::with_capacity(batch * k);
    let mut flat = Vec::with_capacity(batch * k);
    {
        let data = tape.value(scores).data();
        for b in 0..batch {
            let sel = select_top_k(&data[b * n..(b + 1) * n], k)?;
            flat.extend(sel.indices.iter().map(|&i| b * n + i));
            indices.extend(sel.indices);
        }
    }
    let picked = tape.take(scores, flat, &[batch, k])?;
    let weights = tape.softmax(picked, 1)?;
    Ok(Routing {
        scores,
        weights,
        indices,
        k,
    })
}
