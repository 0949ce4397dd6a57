//! Margins, the rho-margin loss and the calibrated log-loss objective.

use super::{LossResult, ScoreBatch};
use crate::error::{Error, Result};
use crate::margins::MarginOffsets;
use crate::segdata::MaskBatch;

/// Magnitude cap applied inside `2^(-|x|)`; the neglected tail is < 1e-150.
pub const LOG_DOMAIN_CLAMP: f64 = 500.0;

/// Best and runner-up of a score row as `(best, best_value, second, second_value)`.
/// Ties go to the lowest index in both slots. Requires at least two entries.
#[inline]
pub fn top_two(row: &[f64]) -> (usize, f64, usize, f64) {
    let (mut b, mut bv) = (0, row[0]);
    let (mut c, mut cv) = (usize::MAX, f64::NEG_INFINITY);
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > bv {
            c = b;
            cv = bv;
            b = j;
            bv = v;
        } else if v > cv {
            c = j;
            cv = v;
        }
    }
    if c == usize::MAX {
        // Single-element rows never reach here through the public API.
        c = b;
        cv = bv;
    }
    (b, bv, c, cv)
}

/// Competitor class `argmax_{j != k} s_j` and its score.
#[inline]
fn competitor(k: usize, top: (usize, f64, usize, f64)) -> (usize, f64) {
    if k == top.0 {
        (top.2, top.3)
    } else {
        (top.0, top.1)
    }
}

/// `lambda_ik = s_ik - max_{j != k} s_ij` for every pixel and class.
pub fn compute_margins_lambda(s: &ScoreBatch) -> Result<Vec<f64>> {
    if s.k_classes < 2 {
        return Err(Error::Config(format!("margins need K >= 2, got {}", s.k_classes)));
    }
    let mut out = Vec::with_capacity(s.scores.len());
    for row in s.scores.chunks(s.k_classes) {
        let top = top_two(row);
        out.extend(row.iter().enumerate().map(|(k, &v)| v - competitor(k, top).1));
    }
    Ok(out)
}

/// `min(1, max(0, 1 - lambda / rho))`.
pub fn rho_margin_loss(lambda: f64, rho: f64) -> Result<f64> {
    if rho.is_nan() || rho <= 0.0 {
        return Err(Error::Domain(format!("rho must be positive, got {rho}")));
    }
    Ok(phi(lambda, rho))
}

#[inline]
pub(crate) fn phi(lambda: f64, rho: f64) -> f64 {
    (1.0 - lambda / rho).clamp(0.0, 1.0)
}

/// `log2(1 + 2^x)`, evaluated as `max(x, 0) + log2(1 + 2^(-|x|))`.
#[inline]
pub fn log2_1p_exp2(x: f64) -> f64 {
    let a = x.abs().min(LOG_DOMAIN_CLAMP);
    x.max(0.0) + (-a).exp2().ln_1p() * std::f64::consts::LOG2_E
}

/// Derivative of [`log2_1p_exp2`]: `1 / (1 + 2^(-x))`.
#[inline]
fn log2_1p_exp2_grad(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp2())
}

/// Smooth upper bound of the rho-margin loss: `log2(1 + 2^(rho - lambda))`.
pub fn calibrated_log_phi(lambda: f64, rho: f64) -> f64 {
    log2_1p_exp2(rho - lambda)
}

/// Margins and calibrated scores for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedScores {
    pub margins: Vec<f64>,
    pub calibrated: Vec<f64>,
    /// Pixels left uncalibrated because their label is `ignore_index`.
    pub ignored: Vec<bool>,
}

fn check_offsets(s: &ScoreBatch, m: &MarginOffsets) -> Result<()> {
    if m.k_classes() != s.k_classes {
        return Err(Error::Shape(format!(
            "{} margin classes vs {} score classes",
            m.k_classes(),
            s.k_classes
        )));
    }
    Ok(())
}

/// Shifts each margin by its class offset: `lambda - rho_k0` on the true
/// class, `lambda + rho_0k` elsewhere.
pub fn calibrate(s: &ScoreBatch, y: &MaskBatch, m: &MarginOffsets) -> Result<CalibratedScores> {
    s.check_labels(y)?;
    check_offsets(s, m)?;
    let margins = compute_margins_lambda(s)?;
    let k_classes = s.k_classes;
    let mut calibrated = margins.clone();
    let mut ignored = vec![false; s.n_pixels];
    for i in 0..s.n_pixels {
        if y.is_ignored(i) {
            ignored[i] = true;
            continue;
        }
        let label = y.labels[i] as usize;
        for k in 0..k_classes {
            let v = &mut calibrated[i * k_classes + k];
            if k == label {
                *v -= m.rho_k0[k];
            } else {
                *v += m.rho_0k[k];
            }
        }
    }
    Ok(CalibratedScores {
        margins,
        calibrated,
        ignored,
    })
}

/// The trainable objective: `1/N_s` times the sum over classes of
/// `log2(1 + 2^-sbar)` on the class's pixels plus `log2(1 + 2^sbar)` on
/// the rest, with `sbar` the calibrated margin.
///
/// The gradient routes each margin's `-1` to the single competitor
/// `argmax_{j != k} s_ij` (lowest index on exact ties).
pub fn calibrated_log_loss(s: &ScoreBatch, y: &MaskBatch, m: &MarginOffsets) -> Result<LossResult> {
    prepare(s, y, m)?;
    let k_classes = s.k_classes;
    let n_valid = y.n_valid();
    let scale = if n_valid > 0 { 1.0 / n_valid as f64 } else { 0.0 };
    let mut grad = vec![0.0; s.scores.len()];
    let mut per_class = vec![(0.0, 0.0); k_classes];
    for i in 0..s.n_pixels {
        if y.is_ignored(i) {
            continue;
        }
        let label = y.labels[i] as usize;
        let row = s.row(i);
        let top = top_two(row);
        let g = &mut grad[i * k_classes..(i + 1) * k_classes];
        for k in 0..k_classes {
            let (comp, comp_score) = competitor(k, top);
            let lambda = row[k] - comp_score;
            let d = if k == label {
                let sbar = lambda - m.rho_k0[k];
                per_class[k].0 += log2_1p_exp2(-sbar);
                -log2_1p_exp2_grad(-sbar)
            } else {
                let sbar = lambda + m.rho_0k[k];
                per_class[k].1 += log2_1p_exp2(sbar);
                log2_1p_exp2_grad(sbar)
            };
            g[k] += d * scale;
            g[comp] -= d * scale;
        }
    }
    Ok(finish(per_class, scale, grad))
}

/// The piecewise-linear objective with `phi_rho` in place of the log-loss.
/// Value only; its gradient is zero or unbounded almost everywhere.
pub fn rho_margin_objective(s: &ScoreBatch, y: &MaskBatch, m: &MarginOffsets) -> Result<LossResult> {
    prepare(s, y, m)?;
    let k_classes = s.k_classes;
    let n_valid = y.n_valid();
    let scale = if n_valid > 0 { 1.0 / n_valid as f64 } else { 0.0 };
    let mut per_class = vec![(0.0, 0.0); k_classes];
    for i in 0..s.n_pixels {
        if y.is_ignored(i) {
            continue;
        }
        let label = y.labels[i] as usize;
        let row = s.row(i);
        let top = top_two(row);
        for k in 0..k_classes {
            let lambda = row[k] - competitor(k, top).1;
            if k == label {
                per_class[k].0 += phi(lambda, m.rho_k0[k]);
            } else {
                per_class[k].1 += phi(-lambda, m.rho_0k[k]);
            }
        }
    }
    Ok(finish(per_class, scale, Vec::new()))
}

fn prepare(s: &ScoreBatch, y: &MaskBatch, m: &MarginOffsets) -> Result<()> {
    if s.k_classes < 2 {
        return Err(Error::Config(format!("margins need K >= 2, got {}", s.k_classes)));
    }
    s.check_labels(y)?;
    check_offsets(s, m)?;
    s.check_finite()
}

fn finish(mut per_class: Vec<(f64, f64)>, scale: f64, grad: Vec<f64>) -> LossResult {
    let mut value = 0.0;
    for part in per_class.iter_mut() {
        part.0 *= scale;
        part.1 *= scale;
        value += part.0 + part.1;
    }
    LossResult { value, grad, per_class }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::margins::{compute_margins, MarginOffsets};
    use crate::segdata::LabelStats;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn offsets(rho_0k: Vec<f64>, rho_k0: Vec<f64>) -> MarginOffsets {
        let mu = rho_0k.iter().zip(&rho_k0).map(|(a, b)| b / a).collect();
        let mut m = MarginOffsets::from_parts(rho_0k, mu, 1.0, 1.0).unwrap();
        m.rho_k0 = rho_k0;
        m
    }

    #[test]
    fn lambda_direct_and_constant_rows() {
        let s = ScoreBatch::new(vec![2.0, 1.0, 0.0, 3.0, 3.0, 3.0], 2, 3).unwrap();
        assert_eq!(
            compute_margins_lambda(&s).unwrap(),
            vec![1.0, -1.0, -2.0, 0.0, 0.0, 0.0]
        );
        let one = ScoreBatch::new(vec![1.0], 1, 1).unwrap();
        assert!(matches!(compute_margins_lambda(&one), Err(Error::Config(_))));
    }

    #[test]
    fn lambda_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, k) = (5, 4);
        let scores: Vec<f64> = (0..n * k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let s = ScoreBatch::new(scores.clone(), n, k).unwrap();
        let lam = compute_margins_lambda(&s).unwrap();
        for i in 0..n {
            for c in 0..k {
                let mut best = f64::NEG_INFINITY;
                for j in 0..k {
                    if j != c {
                        best = best.max(scores[i * k + j]);
                    }
                }
                assert_eq!(lam[i * k + c], scores[i * k + c] - best);
            }
        }
    }

    #[test]
    fn phi_kinks_and_clamps() {
        let rho = 0.7;
        assert_eq!(rho_margin_loss(rho, rho).unwrap(), 0.0);
        assert_eq!(rho_margin_loss(0.0, rho).unwrap(), 1.0);
        assert!((rho_margin_loss(rho / 2.0, rho).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(rho_margin_loss(-3.0, rho).unwrap(), 1.0);
        assert_eq!(rho_margin_loss(2.0 * rho, rho).unwrap(), 0.0);
        assert!(rho_margin_loss(0.0, 0.0).is_err());
        assert!(rho_margin_loss(0.0, -1.0).is_err());
    }

    #[test]
    fn calibration_branches() {
        let m = offsets(vec![2.0, 2.0], vec![0.5, 0.5]);
        let s = ScoreBatch::new(vec![0.0, 0.0], 1, 2).unwrap();
        let y = MaskBatch::from_labels(vec![0]);
        let c = calibrate(&s, &y, &m).unwrap();
        assert_eq!(c.calibrated, vec![-0.5, 2.0]);
    }

    #[test]
    fn ignored_pixels_stay_uncalibrated() {
        let m = offsets(vec![2.0, 2.0], vec![0.5, 0.5]);
        let s = ScoreBatch::new(vec![1.0, 0.0, 0.0, 1.0], 2, 2).unwrap();
        let y = MaskBatch::from_labels(vec![255, 1]);
        let c = calibrate(&s, &y, &m).unwrap();
        assert_eq!(&c.calibrated[..2], &c.margins[..2]);
        assert_eq!(c.ignored, vec![true, false]);
        let l = calibrated_log_loss(&s, &y, &m).unwrap();
        assert_eq!(&l.grad[..2], &[0.0, 0.0]);
    }

    #[test]
    fn calibration_matches_scalar_reimplementation() {
        let stats = LabelStats::from_counts(vec![700, 200, 100]).unwrap();
        let m = compute_margins(&stats, 10.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20;
        let scores: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..3u8)).collect();
        let s = ScoreBatch::new(scores.clone(), n, 3).unwrap();
        let c = calibrate(&s, &MaskBatch::from_labels(labels.clone()), &m).unwrap();
        for i in 0..n {
            for k in 0..3 {
                let others = (0..3).filter(|&j| j != k).map(|j| scores[i * 3 + j]);
                let lam = scores[i * 3 + k] - others.fold(f64::NEG_INFINITY, f64::max);
                let expected = if labels[i] as usize == k {
                    lam - m.rho_k0[k]
                } else {
                    lam + m.rho_0k[k]
                };
                assert_eq!(c.calibrated[i * 3 + k], expected);
            }
        }
    }

    #[test]
    fn zero_scores_closed_form() {
        let m = offsets(vec![1.5, 0.8], vec![0.3, 0.2]);
        let s = ScoreBatch::new(vec![0.0, 0.0], 1, 2).unwrap();
        let y = MaskBatch::from_labels(vec![1]);
        let l = calibrated_log_loss(&s, &y, &m).unwrap();
        let fg = (1.0 + 0.2f64.exp2()).log2();
        let bg = (1.0 + 1.5f64.exp2()).log2();
        assert!((l.per_class[1].0 - fg).abs() < 1e-14);
        assert!((l.per_class[0].1 - bg).abs() < 1e-14);
        assert!((l.value - fg - bg).abs() < 1e-14);
    }

    #[test]
    fn calibrated_zero_contributes_one() {
        assert_eq!(log2_1p_exp2(0.0), 1.0);
        for rho in [1e-3, 0.4, 1.0, 9.5] {
            assert!((calibrated_log_phi(rho, rho) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stable_for_extreme_arguments() {
        assert_eq!(log2_1p_exp2(2000.0), 2000.0);
        assert!(log2_1p_exp2(-2000.0) < 1e-150);
        assert!(log2_1p_exp2_grad(-5000.0) == 0.0 && log2_1p_exp2_grad(5000.0) == 1.0);
    }

    #[test]
    fn rho_objective_hand_evaluation() {
        // One pixel of class 0, scores (1.0, 0.2): lambda = (0.8, -0.8).
        let m = offsets(vec![2.0, 1.0], vec![1.6, 0.4]);
        let s = ScoreBatch::new(vec![1.0, 0.2], 1, 2).unwrap();
        let y = MaskBatch::from_labels(vec![0]);
        let l = rho_margin_objective(&s, &y, &m).unwrap();
        // class 0 foreground: phi_1.6(0.8) = 0.5; class 1 background: phi_1.0(0.8) = 0.2.
        assert!((l.per_class[0].0 - 0.5).abs() < 1e-15);
        assert!((l.per_class[1].1 - 0.2).abs() < 1e-15);
        assert!((l.value - 0.7).abs() < 1e-15);
    }

    #[test]
    fn perfect_separation_zeroes_rho_objective() {
        let m = offsets(vec![0.5, 0.5, 0.5], vec![0.5, 0.5, 0.5]);
        let s = ScoreBatch::new(vec![3.0, 0.0, 0.0, 0.0, 3.0, 0.0], 2, 3).unwrap();
        let y = MaskBatch::from_labels(vec![0, 1]);
        assert_eq!(rho_margin_objective(&s, &y, &m).unwrap().value, 0.0);
    }

    #[test]
    fn non_finite_scores_are_located() {
        let m = offsets(vec![1.0, 1.0], vec![1.0, 1.0]);
        let s = ScoreBatch::new(vec![0.0, 0.0, 0.0, f64::NAN], 2, 2).unwrap();
        let y = MaskBatch::from_labels(vec![0, 1]);
        match calibrated_log_loss(&s, &y, &m) {
            Err(Error::NonFinite { pixel, class }) => assert_eq!((pixel, class), (1, 1)),
            other => panic!("{other:?}"),
        }
    }
}
