//! Segmentation objectives over dense per-pixel class scores.
//!
//! Every loss returns its value together with the analytic gradient with
//! respect to the raw scores. Pixels labelled `ignore_index` contribute
//! nothing and receive a zero gradient; `N_s` counts only the other pixels.

mod baseline;
mod margin;

use std::fmt;
use std::str::FromStr;

pub use baseline::{cross_entropy, focal, soft_dice, softmax_row, tversky};
pub use margin::{
    calibrate, calibrated_log_loss, calibrated_log_phi, compute_margins_lambda, log2_1p_exp2, rho_margin_loss,
    rho_margin_objective, top_two, CalibratedScores, LOG_DOMAIN_CLAMP,
};

use crate::error::{Error, Result};
use crate::margins::MarginOffsets;
use crate::segdata::MaskBatch;

pub const DEFAULT_FOCAL_GAMMA: f64 = 0.4;
pub const DEFAULT_SMOOTH_EPS: f64 = 1e-6;
pub const DEFAULT_TVERSKY_ALPHA: f64 = 0.3;
pub const DEFAULT_TVERSKY_BETA: f64 = 0.7;

/// Raw scores `s_ik`, pixel-major, `k_classes` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBatch {
    pub scores: Vec<f64>,
    pub n_pixels: usize,
    pub k_classes: usize,
}

impl ScoreBatch {
    pub fn new(scores: Vec<f64>, n_pixels: usize, k_classes: usize) -> Result<Self> {
        if scores.len() != n_pixels * k_classes {
            return Err(Error::Shape(format!(
                "{} scores for {n_pixels} pixels x {k_classes} classes",
                scores.len()
            )));
        }
        Ok(Self {
            scores,
            n_pixels,
            k_classes,
        })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.k_classes..(i + 1) * self.k_classes]
    }

    /// Arg-max per pixel, lowest class index on ties.
    pub fn argmax(&self) -> Vec<u8> {
        self.scores
            .chunks(self.k_classes)
            .map(|row| top_two(row).0 as u8)
            .collect()
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        match self.scores.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite {
                pixel: i / self.k_classes,
                class: i % self.k_classes,
            }),
            None => Ok(()),
        }
    }

    pub(crate) fn check_labels(&self, y: &MaskBatch) -> Result<()> {
        if y.n_pixels() != self.n_pixels {
            return Err(Error::Shape(format!(
                "{} score pixels vs {} label pixels",
                self.n_pixels,
                y.n_pixels()
            )));
        }
        y.validate(self.k_classes)
    }
}

/// Loss value, gradient with respect to the scores, and per-class parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// Same layout as [`ScoreBatch::scores`]; empty for value-only losses.
    pub grad: Vec<f64>,
    /// Per class: (foreground part, background part). They sum to `value`.
    pub per_class: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    MarginCalibration,
    CrossEntropy,
    Focal,
    SoftDice,
    Tversky,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::MarginCalibration,
        LossKind::CrossEntropy,
        LossKind::Focal,
        LossKind::SoftDice,
        LossKind::Tversky,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::MarginCalibration => "margin_calibration",
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Focal => "focal",
            LossKind::SoftDice => "soft_dice",
            LossKind::Tversky => "tversky",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss {s:?}")))
    }
}

/// A loss together with its hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    MarginCalibration(MarginOffsets),
    CrossEntropy,
    Focal { gamma: f64 },
    SoftDice { eps: f64 },
    Tversky { alpha: f64, beta: f64, eps: f64 },
}

impl Loss {
    /// Default hyper-parameters for `kind`; margin calibration needs offsets.
    pub fn with_defaults(kind: LossKind, margins: Option<MarginOffsets>) -> Result<Self> {
        Ok(match kind {
            LossKind::MarginCalibration => Loss::MarginCalibration(
                margins.ok_or_else(|| Error::Config("margin calibration needs margin offsets".into()))?,
            ),
            LossKind::CrossEntropy => Loss::CrossEntropy,
            LossKind::Focal => Loss::Focal {
                gamma: DEFAULT_FOCAL_GAMMA,
            },
            LossKind::SoftDice => Loss::SoftDice {
                eps: DEFAULT_SMOOTH_EPS,
            },
            LossKind::Tversky => Loss::Tversky {
                alpha: DEFAULT_TVERSKY_ALPHA,
                beta: DEFAULT_TVERSKY_BETA,
                eps: DEFAULT_SMOOTH_EPS,
            },
        })
    }

    pub fn kind(&self) -> LossKind {
        match self {
            Loss::MarginCalibration(_) => LossKind::MarginCalibration,
            Loss::CrossEntropy => LossKind::CrossEntropy,
            Loss::Focal { .. } => LossKind::Focal,
            Loss::SoftDice { .. } => LossKind::SoftDice,
            Loss::Tversky { .. } => LossKind::Tversky,
        }
    }

    pub fn evaluate(&self, s: &ScoreBatch, y: &MaskBatch) -> Result<LossResult> {
        match self {
            Loss::MarginCalibration(m) => calibrated_log_loss(s, y, m),
            Loss::CrossEntropy => cross_entropy(s, y),
            Loss::Focal { gamma } => focal(s, y, *gamma),
            Loss::SoftDice { eps } => soft_dice(s, y, *eps),
            Loss::Tversky { alpha, beta, eps } => tversky(s, y, *alpha, *beta, *eps),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("lovasz".parse::<LossKind>().is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let s = ScoreBatch::new(vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0], 2, 3).unwrap();
        assert_eq!(s.argmax(), vec![0, 1]);
    }
}
