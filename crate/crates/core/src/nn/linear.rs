use alloc::string::String;

use crate::error::{DkghError, Result};
use crate::nn::{join, kaiming_uniform, zeros_param, Module};
use crate::real::Real;
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Affine map `y = x·Wᵀ + b` with `W[out,in]`, `b[out]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(input: usize, output: usize, rng: &mut SeedRng) -> Self {
        Linear {
            weight: kaiming_uniform(&[output, input], input, rng),
            bias: zeros_param(&[output]),
        }
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || weight.shape()[0] != bias.shape()[0] {
            return Err(DkghError::dim("linear", weight.shape(), bias.shape()));
        }
        Ok(Linear {
            weight: weight.with_grad(),
            bias: bias.with_grad(),
        })
    }

    pub fn input_width(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_width(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward<'p>(&'p self, tape: &mut Tape<'p, T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.input_width() {
            return Err(DkghError::dim("linear", shape, self.weight.shape()));
        }
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let wt = tape.transpose(w)?;
        let y = tape.matmul(x, wt)?;
        tape.add_row_bias(y, b)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(l: &Linear<f64>, x: Tensor<f64>) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = l.forward(&mut tape, v)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn identity_zero_input_and_arithmetic() {
        let eye = Linear::from_parts(
            Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap(),
            Tensor::zeros(&[2]),
        )
        .unwrap();
        let x = Tensor::from_f64(&[2, 2], &[0.3, -1.0, 4.0, 2.5]).unwrap();
        assert_eq!(run(&eye, x.clone()).unwrap(), x);

        let biased = Linear::from_parts(
            Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap(),
            Tensor::from_f64(&[2], &[0.5, -1.5]).unwrap(),
        )
        .unwrap();
        let y = run(&biased, Tensor::zeros(&[3, 3])).unwrap();
        assert_eq!(y.data(), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);

        let l = Linear::from_parts(
            Tensor::from_f64(&[1, 2], &[1., 1.]).unwrap(),
            Tensor::from_f64(&[1], &[0.5]).unwrap(),
        )
        .unwrap();
        let y = run(&l, Tensor::from_f64(&[1, 2], &[2., 3.]).unwrap()).unwrap();
        assert_eq!(y.data(), &[5.5]);
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let mut rng = crate::rng::stream(0, 0);
        let l = Linear::<f64>::new(3, 2, &mut rng);
        assert!(matches!(
            run(&l, Tensor::zeros(&[1, 4])),
            Err(DkghError::Dimension { .. })
        ));
    }
}
