//! A two-layer per-pixel network trained with SGD and momentum.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fmt::g12;
use crate::losses::{Loss, LossKind, ScoreBatch};
use crate::margins::{compute_margins, MarginOffsets, DEFAULT_TAU, DEFAULT_UPSILON};
use crate::metrics::{confusion, iou_report, ConfusionCounts, MetricsReport};
use crate::segdata::{Dataset, FeatureBatch, MaskBatch};

pub const DEFAULT_HIDDEN: usize = 16;
const MODEL_MAGIC: &[u8; 4] = b"PMLP";

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `d -> H -> K` dense network with a ReLU hidden layer, applied to every
/// pixel independently. Parameters are stored flat as `w1 (H x d), b1 (H),
/// w2 (K x H), b2 (K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMLP {
    pub d: usize,
    pub h: usize,
    pub k: usize,
    pub params: Vec<f64>,
}

/// Hidden activations kept from the forward pass for backpropagation.
pub struct ForwardCache {
    hidden: Vec<f64>,
}

impl PixelMLP {
    pub fn n_params(d: usize, h: usize, k: usize) -> usize {
        h * d + h + k * h + k
    }

    pub fn zeros(d: usize, h: usize, k: usize) -> Self {
        Self {
            d,
            h,
            k,
            params: vec![0.0; Self::n_params(d, h, k)],
        }
    }

    /// He-style Gaussian weights scaled by `init_scale`, zero biases.
    pub fn new_seeded(d: usize, h: usize, k: usize, seed: u64, init_scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros(d, h, k);
        let (w1, rest) = m.params.split_at_mut(h * d);
        let w1_std = init_scale * (2.0 / d as f64).sqrt();
        for w in w1.iter_mut() {
            *w = w1_std * sample_normal(&mut rng);
        }
        let w2 = &mut rest[h..h + k * h];
        let w2_std = init_scale * (2.0 / h as f64).sqrt();
        for w in w2.iter_mut() {
            *w = w2_std * sample_normal(&mut rng);
        }
        m
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let (w1, rest) = self.params.split_at(self.h * self.d);
        let (b1, rest) = rest.split_at(self.h);
        let (w2, b2) = rest.split_at(self.k * self.h);
        (w1, b1, w2, b2)
    }

    fn check_input(&self, x: &FeatureBatch) -> Result<()> {
        if x.dim != self.d {
            return Err(Error::Shape(format!(
                "model expects {} features, got {}",
                self.d, x.dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &FeatureBatch) -> Result<ScoreBatch> {
        self.forward_cached(x).map(|(s, _)| s)
    }

    pub fn forward_cached(&self, x: &FeatureBatch) -> Result<(ScoreBatch, ForwardCache)> {
        self.check_input(x)?;
        let (d, h, k) = (self.d, self.h, self.k);
        let (w1, b1, w2, b2) = self.split();
        let n = x.n_pixels();
        let mut hidden = vec![0.0; n * h];
        let mut scores = vec![0.0; n * k];
        for i in 0..n {
            let xi = &x.features[i * d..(i + 1) * d];
            let a = &mut hidden[i * h..(i + 1) * h];
            for j in 0..h {
                let w = &w1[j * d..(j + 1) * d];
                let z = b1[j] + w.iter().zip(xi).map(|(p, q)| p * q).sum::<f64>();
                a[j] = z.max(0.0);
            }
            let s = &mut scores[i * k..(i + 1) * k];
            for c in 0..k {
                let w = &w2[c * h..(c + 1) * h];
                s[c] = b2[c] + w.iter().zip(a.iter()).map(|(p, q)| p * q).sum::<f64>();
            }
        }
        Ok((ScoreBatch::new(scores, n, k)?, ForwardCache { hidden }))
    }

    /// Parameter gradient given `dL/ds` for the batch used in the forward pass.
    pub fn backward(&self, x: &FeatureBatch, cache: &ForwardCache, grad_scores: &[f64]) -> Vec<f64> {
        let (d, h, k) = (self.d, self.h, self.k);
        let (_, _, w2, _) = self.split();
        let mut grad = vec![0.0; self.params.len()];
        let (gw1, rest) = grad.split_at_mut(h * d);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(k * h);
        let mut da = vec![0.0; h];
        for i in 0..x.n_pixels() {
            let g = &grad_scores[i * k..(i + 1) * k];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let a = &cache.hidden[i * h..(i + 1) * h];
            let xi = &x.features[i * d..(i + 1) * d];
            da.fill(0.0);
            for c in 0..k {
                let gc = g[c];
                gb2[c] += gc;
                let w = &w2[c * h..(c + 1) * h];
                let gw = &mut gw2[c * h..(c + 1) * h];
                for j in 0..h {
                    gw[j] += gc * a[j];
                    da[j] += gc * w[j];
                }
            }
            for j in 0..h {
                if a[j] > 0.0 {
                    gb1[j] += da[j];
                    let gw = &mut gw1[j * d..(j + 1) * d];
                    for t in 0..d {
                        gw[t] += da[j] * xi[t];
                    }
                }
            }
        }
        grad
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.params.len());
        out.extend_from_slice(MODEL_MAGIC);
        for v in [self.d, self.h, self.k] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MODEL_MAGIC {
            return Err(Error::format("magic", "not a PixelMLP parameter file"));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (d, h, k) = (dim(0), dim(1), dim(2));
        let n = Self::n_params(d, h, k);
        let body = &bytes[16..];
        if body.len() != 8 * n {
            return Err(Error::format(
                "payload",
                format!("expected {} parameter bytes, found {}", 8 * n, body.len()),
            ));
        }
        let params = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { d, h, k, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io_at(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io_at(path, e))?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub batch_images: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub tau: f64,
    pub upsilon: f64,
    /// Evaluate every this many epochs (the last epoch is always evaluated).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::MarginCalibration,
            epochs: 50,
            batch_images: 8,
            learning_rate: 0.1,
            momentum: 0.9,
            seed: 0,
            tau: DEFAULT_TAU,
            upsilon: DEFAULT_UPSILON,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_images == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_images and eval_every must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_miou: f64,
    /// NaN without a validation split.
    pub val_miou: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn csv_string(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_miou,val_miou,seconds\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch,
                g12(r.train_loss),
                g12(r.train_miou),
                g12(r.val_miou),
                g12(r.seconds)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
        f.write_all(self.csv_string().as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PixelMLP,
    pub log: TrainLog,
    /// Offsets derived from the training split (margin calibration only).
    pub margins: Option<MarginOffsets>,
}

/// Builds the loss for `cfg`, deriving offsets from the training split only.
pub fn loss_for_training(train: &Dataset, k_classes: usize, cfg: &TrainConfig) -> Result<Loss> {
    let margins = match cfg.loss {
        LossKind::MarginCalibration => Some(compute_margins(&train.stats(k_classes)?, cfg.tau, cfg.upsilon)?),
        _ => None,
    };
    Loss::with_defaults(cfg.loss, margins)
}

pub fn train(
    model: PixelMLP,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let loss = loss_for_training(train_set, model.k, cfg)?;
    train_with_loss(model, train_set, val_set, cfg, &loss)
}

/// Training loop for an explicit loss; `cfg.loss`, `tau`, `upsilon` are ignored.
pub fn train_with_loss(
    mut model: PixelMLP,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    loss: &Loss,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.n_images() == 0 {
        return Err(Error::Precondition("empty training set".into()));
    }
    model.check_input(&train_set.features)?;
    train_set.masks.validate(model.k)?;
    let margins = match loss {
        Loss::MarginCalibration(m) => Some(m.clone()),
        _ => None,
    };
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = vec![0.0; model.params.len()];
    let mut order: Vec<usize> = (0..train_set.n_images()).collect();
    let mut log = TrainLog::default();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (batch, chunk) in order.chunks(cfg.batch_images).enumerate() {
            let data = train_set.select_images(chunk);
            let (scores, cache) = model.forward_cached(&data.features)?;
            let result = match loss.evaluate(&scores, &data.masks) {
                Ok(r) => r,
                Err(Error::NonFinite { .. }) => return Err(Error::NanLoss { epoch, batch }),
                Err(e) => return Err(e),
            };
            if !result.value.is_finite() {
                return Err(Error::NanLoss { epoch, batch });
            }
            let grad = model.backward(&data.features, &cache, &result.grad);
            for ((p, v), g) in model.params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v + g;
                *p -= cfg.learning_rate * *v;
            }
            loss_sum += result.value;
            n_batches += 1;
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let train_miou = evaluate(&model, train_set)?.miou;
            let val_miou = match val_set {
                Some(v) => evaluate(&model, v)?.miou,
                None => f64::NAN,
            };
            log.records.push(EpochRecord {
                epoch,
                train_loss: loss_sum / n_batches as f64,
                train_miou,
                val_miou,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(TrainOutcome { model, log, margins })
}

/// Pixels per forward chunk during evaluation.
const EVAL_CHUNK: usize = 1 << 16;

/// Raw-score arg-max predictions for every pixel of `data`.
pub fn predict(model: &PixelMLP, features: &FeatureBatch) -> Result<Vec<u8>> {
    let n = features.n_pixels();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        out.extend(model.forward(&features.slice_pixels(start, end))?.argmax());
        start = end;
    }
    Ok(out)
}

/// Confusion counts of the model's arg-max predictions against the masks.
pub fn evaluate_counts(model: &PixelMLP, data: &Dataset) -> Result<ConfusionCounts> {
    let pred = MaskBatch {
        labels: predict(model, &data.features)?,
        ..data.masks.clone()
    };
    confusion(&pred, &data.masks, model.k)
}

pub fn evaluate(model: &PixelMLP, data: &Dataset) -> Result<MetricsReport> {
    Ok(iou_report(&evaluate_counts(model, data)?))
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub loss: LossKind,
    pub seed: u64,
    pub val: MetricsReport,
    pub log: TrainLog,
}

/// Trains one fresh model per `(loss, seed)` and evaluates it on `val`.
/// Model initialization and batch order both derive from the seed.
pub fn run_ablation(
    train_set: &Dataset,
    val_set: &Dataset,
    losses: &[LossKind],
    seeds: &[u64],
    base: &TrainConfig,
    hidden: usize,
) -> Result<Vec<AblationRun>> {
    let k = val_set_classes(train_set, val_set)?;
    let mut runs = Vec::with_capacity(losses.len() * seeds.len());
    for &loss in losses {
        for &seed in seeds {
            let cfg = TrainConfig {
                loss,
                seed,
                ..base.clone()
            };
            let model = PixelMLP::new_seeded(train_set.features.dim, hidden, k, seed, 1.0);
            let out = train(model, train_set, None, &cfg)?;
            runs.push(AblationRun {
                loss,
                seed,
                val: evaluate(&out.model, val_set)?,
                log: out.log,
            });
        }
    }
    Ok(runs)
}

fn val_set_classes(train_set: &Dataset, val_set: &Dataset) -> Result<usize> {
    let max_label = |d: &Dataset| {
        d.masks
            .labels
            .iter()
            .filter(|&&l| l != d.masks.ignore_index)
            .max()
            .copied()
            .unwrap_or(0) as usize
    };
    let k = max_label(train_set).max(max_label(val_set)) + 1;
    if k < 2 {
        return Err(Error::Precondition("ablation needs at least two classes".into()));
    }
    Ok(k)
}
