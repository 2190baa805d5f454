use alloc::string::String;

use crate::error::{DkghError, Result};
use crate::nn::{join, Conv2d, Module};
use crate::real::Real;
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// ResNet basic block without normalization:
/// `relu(conv2(relu(conv1(x))) + skip(x))`.
///
/// `conv1` carries the stride; `skip` is the identity when channels and
/// resolution are preserved and a strided 1×1 projection otherwise.
#[derive(Debug, Clone)]
pub struct ResidualBasicBlock<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub projection: Option<Conv2d<T>>,
}

impl<T: Real> ResidualBasicBlock<T> {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, rng: &mut SeedRng) -> Self {
        let conv1 = Conv2d::new(in_channels, out_channels, 3, stride, 1, rng);
        let conv2 = Conv2d::new(out_channels, out_channels, 3, 1, 1, rng);
        let projection = (stride != 1 || in_channels != out_channels)
            .then(|| Conv2d::new(in_channels, out_channels, 1, stride, 0, rng));
        ResidualBasicBlock {
            conv1,
            conv2,
            projection,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn stride(&self) -> usize {
        self.conv1.stride
    }

    /// Parameter count for a block of this configuration.
    pub fn param_count_for(in_channels: usize, out_channels: usize, stride: usize) -> usize {
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let proj = if stride != 1 || in_channels != out_channels {
            conv(in_channels, out_channels, 1)
        } else {
            0
        };
        conv(in_channels, out_channels, 3) + conv(out_channels, out_channels, 3) + proj
    }

    pub fn forward<'p>(&'p self, tape: &mut Tape<'p, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, h)?;
        let skip = match &self.projection {
            Some(p) => p.forward(tape, x)?,
            None => x,
        };
        if tape.shape(h) != tape.shape(skip) {
            return Err(DkghError::Contract(alloc::format!(
                "residual branch {:?} does not match skip path {:?}",
                tape.shape(h),
                tape.shape(skip)
            )));
        }
        let y = tape.add(h, skip)?;
        tape.relu(y)
    }
}

impl<T: Real> Module<T> for ResidualBasicBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        if let Some(p) = &self.projection {
            p.visit(&join(prefix, "projection"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        if let Some(p) = &mut self.projection {
            p.visit_mut(&join(prefix, "projection"), f);
        }
    }
}
