use alloc::string::String;

use crate::error::{DkghError, Result};
use crate::nn::{join, kaiming_uniform, zeros_param, Module};
use crate::real::Real;
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Square-kernel convolution with per-output-channel bias.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut SeedRng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: kaiming_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: zeros_param(&[out_channels]),
            stride,
            pad,
        }
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        if weight.rank() != 4 || bias.rank() != 1 || weight.shape()[0] != bias.shape()[0] {
            return Err(DkghError::dim("conv2d", weight.shape(), bias.shape()));
        }
        Ok(Conv2d {
            weight: weight.with_grad(),
            bias: bias.with_grad(),
            stride,
            pad,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward<'p>(&'p self, tape: &mut Tape<'p, T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.conv2d(x, w, self.stride, self.pad)?;
        tape.add_channel_bias(y, b)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
