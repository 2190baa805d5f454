use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{DkghError, Result};
use crate::nn::{join, Linear, Module};
use crate::real::Real;
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Linear layers with ReLU between them and nothing after the last.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Real> Mlp<T> {
    /// `widths = [in, hidden.., out]`.
    pub fn new(widths: &[usize], rng: &mut SeedRng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(DkghError::Config("an MLP needs at least two widths".into()));
        }
        let layers = widths
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Linear<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(DkghError::Config("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(DkghError::dim(
                    "mlp",
                    pair[0].weight.shape(),
                    pair[1].weight.shape(),
                ));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].output_width()
    }

    pub fn forward<'p>(&'p self, tape: &mut Tape<'p, T>, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

impl<T: Real> Module<T> for Mlp<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("{i}")), f);
        }
    }
}
