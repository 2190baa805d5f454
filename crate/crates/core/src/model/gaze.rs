use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{DkghError, Result};
use crate::nn::{join, Conv2d, Linear, Module};
use crate::real::Real;
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Heatmap → `x_exp`: three stride-2 3×3 convolutions with ReLU, global
/// average pooling, then a linear map to the gaze feature width.
#[derive(Debug, Clone)]
pub struct GazeEncoder<T> {
    pub convs: Vec<Conv2d<T>>,
    pub out: Linear<T>,
}

impl<T: Real> GazeEncoder<T> {
    pub fn new(channels: &[usize], width: usize, rng: &mut SeedRng) -> Self {
        let mut c_in = 1;
        let convs = channels
            .iter()
            .map(|&c| {
                let conv = Conv2d::new(c_in, c, 3, 2, 1, rng);
                c_in = c;
                conv
            })
            .collect();
        GazeEncoder {
            convs,
            out: Linear::new(c_in, width, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.out.output_width()
    }

    /// `heatmap[B,1,H,W]` with values in `[0, 1]` → `[B, width]`.
    pub fn encode<'p>(&'p self, tape: &mut Tape<'p, T>, heatmap: Var) -> Result<Var> {
        let hm = tape.value(heatmap);
        if hm.rank() != 4 || hm.shape()[1] != 1 {
            return Err(DkghError::dim("encode_gaze", hm.shape(), &[0, 1, 0, 0]));
        }
        if let Some(v) = hm.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(DkghError::Validation(format!(
                "gaze heatmap values must lie in [0, 1], found {v}"
            )));
        }
        let mut h = heatmap;
        for conv in &self.convs {
            h = conv.forward(tape, h)?;
            h = tape.relu(h)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        self.out.forward(tape, pooled)
    }
}

impl<T: Real> Module<T> for GazeEncoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
        }
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn encode(enc: &GazeEncoder<f64>, hm: Tensor<f64>) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let v = tape.constant(hm);
        let y = enc.encode(&mut tape, v)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn zero_heatmap_zero_feature() {
        let enc = GazeEncoder::<f64>::new(&[4, 8, 8], 6, &mut stream(1, 0));
        let y = encode(&enc, Tensor::zeros(&[2, 1, 16, 16])).unwrap();
        assert_eq!(y.shape(), &[2, 6]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_heatmaps_identical_rows() {
        let enc = GazeEncoder::<f64>::new(&[4, 8, 8], 6, &mut stream(2, 0));
        let one: alloc::vec::Vec<f64> = (0..256).map(|i| (i % 17) as f64 / 16.0).collect();
        let mut both = one.clone();
        both.extend_from_slice(&one);
        let y = encode(&enc, Tensor::new(&[2, 1, 16, 16], both).unwrap()).unwrap();
        assert_eq!(y.data()[..6], y.data()[6..]);
    }

    #[test]
    fn out_of_range_heatmap_rejected() {
        let enc = GazeEncoder::<f64>::new(&[4, 8, 8], 6, &mut stream(2, 0));
        let mut hm = Tensor::zeros(&[1, 1, 8, 8]);
        hm.data_mut()[5] = 1.5;
        assert!(matches!(encode(&enc, hm), Err(DkghError::Validation(_))));
    }
}
