use alloc::string::String;

use crate::error::{DkghError, Result};
use crate::nn::{Linear, Module};
use crate::real::Real;
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `p = σ(w_p · [x_f ‖ x_exp] + b)`, one blend weight per sample.
#[derive(Debug, Clone)]
pub struct FusionGate<T> {
    pub linear: Linear<T>,
}

impl<T: Real> FusionGate<T> {
    pub fn new(image_width: usize, gaze_width: usize, rng: &mut SeedRng) -> Self {
        FusionGate {
            linear: Linear::new(image_width + gaze_width, 1, rng),
        }
    }

    pub fn from_linear(linear: Linear<T>) -> Result<Self> {
        if linear.output_width() != 1 {
            return Err(DkghError::Config("the fusion gate outputs a single logit".into()));
        }
        Ok(FusionGate { linear })
    }

    /// `[B,1]` gate values in (0, 1).
    pub fn forward<'p>(&'p self, tape: &mut Tape<'p, T>, x_f: Var, x_exp: Var) -> Result<Var> {
        let (a, b) = (tape.shape(x_f), tape.shape(x_exp));
        if a.len() != 2 || b.len() != 2 || a[1] + b[1] != self.linear.input_width() {
            return Err(DkghError::dim("gate_value", a, b));
        }
        let joined = tape.concat_cols(x_f, x_exp)?;
        let logit = self.linear.forward(tape, joined)?;
        tape.sigmoid(logit)
    }
}

impl<T: Real> Module<T> for FusionGate<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.linear.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.linear.visit_mut(prefix, f);
    }
}
