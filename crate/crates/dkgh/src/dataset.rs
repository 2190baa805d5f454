//! In-memory dataset: every image and heatmap decoded once up front.

use dkgh_core::{Real, Tensor};
use rand::Rng;

use crate::augment::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::manifest::SampleManifest;
use crate::pgm::load_image;

#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub rows: Vec<SampleManifest>,
    /// `[1, H, W]` each.
    pub images: Vec<Tensor<T>>,
    pub heatmaps: Vec<Tensor<T>>,
}

/// A stacked batch ready for the network.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// Positions in the dataset.
    pub indices: Vec<usize>,
    pub images: Tensor<T>,
    pub heatmaps: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> Dataset<T> {
    /// Loads every referenced file. Images must share one shape, and so must
    /// heatmaps.
    pub fn load(rows: Vec<SampleManifest>) -> Result<Self> {
        let mut images = Vec::with_capacity(rows.len());
        let mut heatmaps = Vec::with_capacity(rows.len());
        for r in &rows {
            let img = load_image::<T>(&r.image_path)?;
            let hm = load_image::<T>(&r.heatmap_path)?;
            for (t, first, what) in [(&img, images.first(), "image"), (&hm, heatmaps.first(), "heatmap")] {
                if let Some(f) = first {
                    let f: &Tensor<T> = f;
                    if f.shape() != t.shape() {
                        return Err(Error::Config(format!(
                            "{what} of `{}` has shape {:?}, earlier samples {:?}",
                            r.sample_id,
                            t.shape(),
                            f.shape()
                        )));
                    }
                }
            }
            images.push(img);
            heatmaps.push(hm);
        }
        Ok(Dataset { rows, images, heatmaps })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.rows[i].label).collect()
    }

    /// Stacks the given samples, augmenting images when `aug` is supplied.
    pub fn batch<R: Rng + ?Sized>(&self, indices: &[usize], aug: Option<(&AugmentConfig, &mut R)>) -> Result<Batch<T>> {
        let mut imgs = Vec::with_capacity(indices.len());
        let mut hms = Vec::with_capacity(indices.len());
        match aug {
            Some((cfg, rng)) => {
                for &i in indices {
                    let (x, h) = augment(&self.images[i], &self.heatmaps[i], cfg, rng);
                    imgs.push(x);
                    hms.push(h);
                }
            }
            None => {
                for &i in indices {
                    imgs.push(self.images[i].clone());
                    hms.push(self.heatmaps[i].clone());
                }
            }
        }
        let images = Tensor::stack(&imgs.iter().collect::<Vec<_>>())?;
        let heatmaps = Tensor::stack(&hms.iter().collect::<Vec<_>>())?;
        Ok(Batch {
            indices: indices.to_vec(),
            images,
            heatmaps,
            labels: self.labels(indices),
        })
    }
}
