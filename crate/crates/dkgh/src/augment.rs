//! Photometric augmentation of images; heatmaps pass through untouched.

use dkgh_core::{Real, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Contrast and brightness factors are drawn from `[lo, hi]`.
    pub brightness_contrast_range: (f64, f64),
    pub noise_sigma: f64,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            brightness_contrast_range: (0.8, 1.2),
            noise_sigma: 0.05,
            enabled: true,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.brightness_contrast_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("augmentation range [{lo}, {hi}] is not ordered")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }
}

/// `x' = clamp(c·(x − ½) + ½ + (b − 1)·½ + η, 0, 1)` with `c, b ~ U[lo, hi]`
/// and `η ~ N(0, σ²)` per pixel.
///
/// Evaluated as `x + (c − 1)(x − ½) + (b − 1)·½ + η` so that the degenerate
/// configuration returns `x` bit for bit.
pub fn augment<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    heatmap: &Tensor<T>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Tensor<T>, Tensor<T>) {
    if !cfg.enabled {
        return (x.clone(), heatmap.clone());
    }
    let (lo, hi) = cfg.brightness_contrast_range;
    let contrast = rng.random_range(lo..=hi);
    let brightness = rng.random_range(lo..=hi);
    let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma).expect("sigma validated"));
    let half = T::lit(0.5);
    let (c1, shift) = (T::lit(contrast - 1.0), T::lit((brightness - 1.0) * 0.5));
    let mut out = x.clone();
    for v in out.data_mut() {
        let eta = noise.map_or(T::zero(), |n| T::lit(n.sample(rng)));
        let y = *v + c1 * (*v - half) + shift + eta;
        *v = y.max(T::zero()).min(T::one());
    }
    (out, heatmap.clone())
}
