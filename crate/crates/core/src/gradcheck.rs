//! Central finite-difference checks of the loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::losses::{Loss, LossKind, ScoreBatch};
use crate::margins::{compute_margins, DEFAULT_TAU, DEFAULT_UPSILON};
use crate::segdata::{LabelStats, MaskBatch};

pub const FD_STEP: f64 = 1e-5;
/// Floor on the relative-error denominator for near-zero gradient entries.
pub const REL_FLOOR: f64 = 1e-8;
/// Rows whose three largest scores are closer than this are treated as ties.
pub const TIE_GAP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub loss: LossKind,
    pub max_rel_err: f64,
    pub n_probes: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Loss used for checking `kind`; margin calibration gets offsets from a
/// fixed imbalanced count vector so every class has a distinct offset.
pub fn loss_for_check(kind: LossKind, k_classes: usize) -> Result<Loss> {
    let margins = match kind {
        LossKind::MarginCalibration => {
            let counts = (0..k_classes).map(|k| 1000u64 >> k.min(8)).collect();
            Some(compute_margins(
                &LabelStats::from_counts(counts)?,
                DEFAULT_TAU,
                DEFAULT_UPSILON,
            )?)
        }
        _ => None,
    };
    Loss::with_defaults(kind, margins)
}

fn near_tie(row: &[f64]) -> bool {
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.windows(2).take(2).any(|w| w[0] - w[1] < TIE_GAP)
}

/// Checks every coordinate of a batch away from arg-max ties and returns
/// `(max relative error, probes)`.
pub fn check_batch(loss: &Loss, s: &ScoreBatch, y: &MaskBatch) -> Result<(f64, usize)> {
    let analytic = loss.evaluate(s, y)?.grad;
    let mut worst = 0.0f64;
    let mut probes = 0;
    let mut probe = s.clone();
    for i in 0..s.n_pixels {
        if near_tie(s.row(i)) {
            continue;
        }
        for k in 0..s.k_classes {
            let idx = i * s.k_classes + k;
            let orig = s.scores[idx];
            probe.scores[idx] = orig + FD_STEP;
            let plus = loss.evaluate(&probe, y)?.value;
            probe.scores[idx] = orig - FD_STEP;
            let minus = loss.evaluate(&probe, y)?.value;
            probe.scores[idx] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[idx], numeric));
            probes += 1;
        }
    }
    Ok((worst, probes))
}

/// Random Gaussian score batch (std 2) with uniform labels.
pub fn random_batch(rng: &mut impl Rng, n_pixels: usize, k_classes: usize) -> (ScoreBatch, MaskBatch) {
    let scores: Vec<f64> = (0..n_pixels * k_classes)
        .map(|_| 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    let labels = (0..n_pixels).map(|_| rng.random_range(0..k_classes as u8)).collect();
    (
        ScoreBatch::new(scores, n_pixels, k_classes).expect("consistent shape"),
        MaskBatch::from_labels(labels),
    )
}

/// Runs [`check_batch`] on `n_batches` seeded random batches.
pub fn gradcheck(
    kind: LossKind,
    seed: u64,
    n_batches: usize,
    n_pixels: usize,
    k_classes: usize,
) -> Result<GradcheckReport> {
    let loss = loss_for_check(kind, k_classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut probes = 0;
    for _ in 0..n_batches {
        let (s, y) = random_batch(&mut rng, n_pixels, k_classes);
        let (w, p) = check_batch(&loss, &s, &y)?;
        worst = worst.max(w);
        probes += p;
    }
    Ok(GradcheckReport {
        loss: kind,
        max_rel_err: worst,
        n_probes: probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_loss_passes_on_small_batches() {
        for kind in LossKind::ALL {
            let r = gradcheck(kind, 7, 5, 16, 3).unwrap();
            assert!(r.max_rel_err <= 1e-4, "{kind}: {}", r.max_rel_err);
            assert!(r.n_probes > 0);
        }
    }

    #[test]
    fn ties_are_skipped() {
        assert!(near_tie(&[1.0, 1.0, 0.0]));
        assert!(near_tie(&[2.0, 1.0, 1.0]));
        assert!(!near_tie(&[2.0, 1.0, 0.0]));
    }
}
