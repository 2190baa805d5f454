//! Parameterized layers.

mod block;
mod conv;
mod linear;
mod mlp;

pub use block::ResidualBasicBlock;
pub use conv::Conv2d;
pub use linear::Linear;
pub use mlp::Mlp;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::real::Real;
use crate::rng::SeedRng;
use crate::tensor::Tensor;

/// Anything that owns named trainable tensors.
///
/// Names are dotted paths (`stages.1.0.dd.experts.2.conv1.weight`); visiting
/// order is fixed by the structure, which makes it usable as a stable
/// parameter ordering for optimizers and checkpoints.
pub trait Module<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t)));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, t| t.zero_grad());
    }
}

/// `prefix.name`, or just `name` at the root.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Real> Module<T> for Vec<Tensor<T>> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, t) in self.iter().enumerate() {
            f(join(prefix, &format!("{i}")), t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, t) in self.iter_mut().enumerate() {
            f(join(prefix, &format!("{i}")), t);
        }
    }
}

/// Kaiming-uniform weights: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut SeedRng) -> Tensor<T> {
    let bound = Float::sqrt(6.0 / fan_in as f64);
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape matches").with_grad()
}

pub(crate) fn zeros_param<T: Real>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape).with_grad()
}
