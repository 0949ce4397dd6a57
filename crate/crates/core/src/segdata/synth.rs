use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{FeatureBatch, LabelStats, MaskBatch};
use crate::error::{Error, Result};

/// Per-pixel feature count produced by [`features_from_intensity`].
pub const FEATURE_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub n_images: usize,
    pub k_classes: usize,
    /// Desired pixel fraction per class; entry 0 is the background.
    pub target_ratios: Vec<f64>,
    pub noise_sigma: f64,
}

impl SynthConfig {
    pub fn new(
        seed: u64,
        width: usize,
        height: usize,
        n_images: usize,
        target_ratios: Vec<f64>,
        noise_sigma: f64,
    ) -> Self {
        Self {
            seed,
            width,
            height,
            n_images,
            k_classes: target_ratios.len(),
            target_ratios,
            noise_sigma,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k_classes < 2 {
            return Err(Error::Config(format!("need K >= 2, got {}", self.k_classes)));
        }
        if self.target_ratios.len() != self.k_classes {
            return Err(Error::Config(format!(
                "{} target ratios for K = {}",
                self.target_ratios.len(),
                self.k_classes
            )));
        }
        if self.width == 0 || self.height == 0 || self.n_images == 0 {
            return Err(Error::Config("width, height and n_images must be positive".into()));
        }
        if self.target_ratios.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::Config("target ratios must all be positive".into()));
        }
        let sum: f64 = self.target_ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("target ratios sum to {sum}, expected 1")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and non-negative".into()));
        }
        if self.k_classes > 255 {
            return Err(Error::Config("at most 255 classes fit in 8-bit masks".into()));
        }
        Ok(())
    }

    fn radius(&self, class: usize) -> f64 {
        (self.target_ratios[class] * (self.width * self.height) as f64 / PI).sqrt()
    }

    pub fn class_intensity(&self, class: usize) -> f64 {
        0.2 + 0.6 * class as f64 / (self.k_classes - 1) as f64
    }
}

/// Features and masks for a set of images of identical size.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: FeatureBatch,
    pub masks: MaskBatch,
}

impl Dataset {
    pub fn new(features: FeatureBatch, masks: MaskBatch) -> Result<Self> {
        if features.n_pixels() != masks.n_pixels() {
            return Err(Error::Shape(format!(
                "{} feature pixels vs {} mask pixels",
                features.n_pixels(),
                masks.n_pixels()
            )));
        }
        Ok(Self { features, masks })
    }

    pub fn n_images(&self) -> usize {
        self.masks.n_images
    }

    pub fn select_images(&self, indices: &[usize]) -> Dataset {
        let m = self.masks.pixels_per_image();
        let d = self.features.dim;
        let mut features = Vec::with_capacity(indices.len() * m * d);
        for &i in indices {
            features.extend_from_slice(&self.features.features[i * m * d..(i + 1) * m * d]);
        }
        Dataset {
            features: FeatureBatch { features, dim: d },
            masks: self.masks.select_images(indices),
        }
    }

    pub fn stats(&self, k_classes: usize) -> Result<LabelStats> {
        super::accumulate_stats(std::slice::from_ref(&self.masks), k_classes)
    }
}

/// Builds the fixed 8-dimensional feature map for one `width x height`
/// intensity image: `(x/w, y/h, intensity, xy/(wh), (x/w)^2, (y/h)^2, r, 1)`
/// where `r` is the distance to the image centre scaled to `[0, 1]`.
pub fn features_from_intensity(intensity: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(intensity.len() * FEATURE_DIM);
    let r_max = 0.5f64.sqrt();
    for y in 0..height {
        for x in 0..width {
            let u = x as f64 / width as f64;
            let v = y as f64 / height as f64;
            let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt() / r_max;
            out.extend_from_slice(&[u, v, intensity[y * width + x], u * v, u * u, v * v, r, 1.0]);
        }
    }
    out
}

/// Seeded images of a background (class 0) with one disk per foreground
/// class, sized so each class covers roughly its target pixel fraction.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let min_side = w.min(h) as f64;
    for k in 1..cfg.k_classes {
        let r = cfg.radius(k);
        if 2.0 * r > min_side {
            return Err(Error::Config(format!(
                "class {k} ratio {} needs a disk of diameter {:.2} > image side {min_side}",
                cfg.target_ratios[k],
                2.0 * r
            )));
        }
    }
    let mut order: Vec<usize> = (1..cfg.k_classes).collect();
    order.sort_by(|&a, &b| cfg.target_ratios[b].total_cmp(&cfg.target_ratios[a]).then(a.cmp(&b)));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let m = w * h;
    let mut labels = Vec::with_capacity(cfg.n_images * m);
    let mut features = Vec::with_capacity(cfg.n_images * m * FEATURE_DIM);
    let mut image = vec![0u8; m];
    let mut intensity = vec![0.0; m];

    for _ in 0..cfg.n_images {
        image.fill(0);
        let mut placed: Vec<(f64, f64, f64)> = Vec::new();
        for &k in &order {
            let r = cfg.radius(k);
            let mut centre = (0.0, 0.0);
            // Rejection-sample a centre whose disk avoids the ones already drawn.
            for _ in 0..100 {
                centre = (rng.random_range(r..=w as f64 - r), rng.random_range(r..=h as f64 - r));
                let clear = placed
                    .iter()
                    .all(|&(cx, cy, pr)| (cx - centre.0).powi(2) + (cy - centre.1).powi(2) >= (pr + r).powi(2));
                if clear {
                    break;
                }
            }
            placed.push((centre.0, centre.1, r));
            paint_disk(&mut image, w, h, centre, r, k as u8);
        }
        for (p, &l) in image.iter().enumerate() {
            let mean = cfg.class_intensity(l as usize);
            intensity[p] = if cfg.noise_sigma > 0.0 {
                mean + noise.sample(&mut rng)
            } else {
                mean
            };
        }
        labels.extend_from_slice(&image);
        features.extend(features_from_intensity(&intensity, w, h));
    }
    Dataset::new(
        FeatureBatch::new(features, FEATURE_DIM)?,
        MaskBatch::new(labels, w, h, cfg.n_images)?,
    )
}

fn paint_disk(image: &mut [u8], w: usize, h: usize, (cx, cy): (f64, f64), r: f64, class: u8) {
    let y0 = ((cy - r).floor().max(0.0)) as usize;
    let y1 = ((cy + r).ceil() as usize).min(h);
    let x0 = ((cx - r).floor().max(0.0)) as usize;
    let x1 = ((cx + r).ceil() as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                image[y * w + x] = class;
            }
        }
    }
}
