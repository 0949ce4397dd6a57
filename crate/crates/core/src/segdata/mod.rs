//! Masks, per-pixel features, synthetic data and label statistics.

mod pgm;
mod stats;
mod synth;

pub use pgm::{encode_pgm, parse_pgm, read_grey_pgm, read_mask_pgm, write_grey_pgm, write_mask_pgm};
pub use stats::{accumulate_stats, read_stats_csv, write_stats_csv, LabelStats};
pub use synth::{features_from_intensity, generate_synthetic, Dataset, SynthConfig, FEATURE_DIM};

use crate::error::{Error, Result};

pub const DEFAULT_IGNORE_INDEX: u8 = 255;

/// Integer ground-truth (or predicted) labels for one or more equally sized
/// images, stored image-major then row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBatch {
    pub labels: Vec<u8>,
    pub width: usize,
    pub height: usize,
    pub n_images: usize,
    pub ignore_index: u8,
}

impl MaskBatch {
    pub fn new(labels: Vec<u8>, width: usize, height: usize, n_images: usize) -> Result<Self> {
        if labels.len() != width * height * n_images {
            return Err(Error::Shape(format!(
                "{} labels for {n_images} images of {width}x{height}",
                labels.len()
            )));
        }
        Ok(Self {
            labels,
            width,
            height,
            n_images,
            ignore_index: DEFAULT_IGNORE_INDEX,
        })
    }

    /// Flat batch of `labels.len()` pixels with no image structure.
    pub fn from_labels(labels: Vec<u8>) -> Self {
        let n = labels.len();
        Self {
            labels,
            width: n,
            height: 1,
            n_images: 1,
            ignore_index: DEFAULT_IGNORE_INDEX,
        }
    }

    pub fn with_ignore_index(mut self, ignore_index: u8) -> Self {
        self.ignore_index = ignore_index;
        self
    }

    pub fn pixels_per_image(&self) -> usize {
        self.width * self.height
    }

    pub fn n_pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn image(&self, index: usize) -> &[u8] {
        let m = self.pixels_per_image();
        &self.labels[index * m..(index + 1) * m]
    }

    #[inline]
    pub fn is_ignored(&self, pixel: usize) -> bool {
        self.labels[pixel] == self.ignore_index
    }

    /// Number of pixels that are not `ignore_index`.
    pub fn n_valid(&self) -> usize {
        self.labels.iter().filter(|&&l| l != self.ignore_index).count()
    }

    /// Checks that every label is below `k_classes` or equals the ignore index.
    pub fn validate(&self, k_classes: usize) -> Result<()> {
        let m = self.pixels_per_image().max(1);
        for (i, &l) in self.labels.iter().enumerate() {
            if l != self.ignore_index && (l as usize) >= k_classes {
                return Err(Error::Data {
                    image: i / m,
                    offset: i % m,
                    msg: format!(
                        "label {l} outside [0, {k_classes}) and not ignore ({})",
                        self.ignore_index
                    ),
                });
            }
        }
        Ok(())
    }

    /// New batch holding the listed images, in order.
    pub fn select_images(&self, indices: &[usize]) -> MaskBatch {
        let mut labels = Vec::with_capacity(indices.len() * self.pixels_per_image());
        for &i in indices {
            labels.extend_from_slice(self.image(i));
        }
        MaskBatch {
            labels,
            width: self.width,
            height: self.height,
            n_images: indices.len(),
            ignore_index: self.ignore_index,
        }
    }

    /// Concatenates same-sized batches.
    pub fn concat(batches: &[MaskBatch]) -> Result<MaskBatch> {
        let first = batches
            .first()
            .ok_or_else(|| Error::Precondition("no mask batches to concatenate".into()))?;
        let mut labels = Vec::new();
        let mut n_images = 0;
        for b in batches {
            if b.width != first.width || b.height != first.height || b.ignore_index != first.ignore_index {
                return Err(Error::Shape("cannot concatenate masks of different geometry".into()));
            }
            labels.extend_from_slice(&b.labels);
            n_images += b.n_images;
        }
        Ok(MaskBatch {
            labels,
            width: first.width,
            height: first.height,
            n_images,
            ignore_index: first.ignore_index,
        })
    }
}

/// Per-pixel input features, `dim` values per pixel, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub features: Vec<f64>,
    pub dim: usize,
}

impl FeatureBatch {
    pub fn new(features: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || !features.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!(
                "{} feature values are not a multiple of dim {dim}",
                features.len()
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                pixel: i / dim,
                class: i % dim,
            });
        }
        Ok(Self { features, dim })
    }

    pub fn n_pixels(&self) -> usize {
        self.features.len() / self.dim
    }

    #[inline]
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Features of a contiguous pixel range.
    pub fn slice_pixels(&self, start: usize, end: usize) -> FeatureBatch {
        FeatureBatch {
            features: self.features[start * self.dim..end * self.dim].to_vec(),
            dim: self.dim,
        }
    }
}
