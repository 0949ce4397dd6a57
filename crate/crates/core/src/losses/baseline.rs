//! Softmax-based reference objectives: cross-entropy, focal, soft Dice, Tversky.

use super::{LossResult, ScoreBatch};
use crate::error::{Error, Result};
use crate::segdata::MaskBatch;

/// Numerically stable softmax of one score row into `out`.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn prepare(s: &ScoreBatch, y: &MaskBatch) -> Result<f64> {
    s.check_labels(y)?;
    s.check_finite()?;
    let n_valid = y.n_valid();
    Ok(if n_valid > 0 { 1.0 / n_valid as f64 } else { 0.0 })
}

pub fn cross_entropy(s: &ScoreBatch, y: &MaskBatch) -> Result<LossResult> {
    focal(s, y, 0.0)
}

/// `-(1 - p_y)^gamma log p_y` averaged over pixels. `gamma = 0` is
/// cross-entropy.
pub fn focal(s: &ScoreBatch, y: &MaskBatch, gamma: f64) -> Result<LossResult> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Domain(format!("focal gamma must be >= 0, got {gamma}")));
    }
    let scale = prepare(s, y)?;
    let k_classes = s.k_classes;
    let mut grad = vec![0.0; s.scores.len()];
    let mut per_class = vec![(0.0, 0.0); k_classes];
    let mut p = vec![0.0; k_classes];
    for i in 0..s.n_pixels {
        if y.is_ignored(i) {
            continue;
        }
        let label = y.labels[i] as usize;
        let row = s.row(i);
        softmax_row(row, &mut p);
        // log p_y through log-sum-exp so saturated rows stay finite.
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let log_py = row[label] - lse;
        let py = p[label];
        let q = 1.0 - py;
        let (term, dl_dlogit_y) = if gamma == 0.0 {
            (-log_py, -1.0)
        } else {
            let weight = q.powf(gamma);
            // d/dz of -(1-p)^g log p, z the logit of the true class, chain
            // through dp_y/dz_j = p_y (delta_jy - p_j); the common factor
            // (delta_jy - p_j) is applied below.
            let a = if q > 0.0 {
                gamma * py * log_py * q.powf(gamma - 1.0)
            } else {
                0.0
            };
            (-weight * log_py, a - weight)
        };
        per_class[label].0 += term;
        let g = &mut grad[i * k_classes..(i + 1) * k_classes];
        for j in 0..k_classes {
            let delta = if j == label { 1.0 } else { 0.0 };
            g[j] = dl_dlogit_y * (delta - p[j]) * scale;
        }
    }
    let mut value = 0.0;
    for part in per_class.iter_mut() {
        part.0 *= scale;
        value += part.0;
    }
    Ok(LossResult { value, grad, per_class })
}

/// Per-class soft overlap sums over the valid pixels.
struct Overlap {
    probs: Vec<f64>,
    /// sum_i p_ik g_ik
    tp: Vec<f64>,
    /// sum_i p_ik
    p_sum: Vec<f64>,
    /// sum_i g_ik
    g_sum: Vec<f64>,
}

fn overlap(s: &ScoreBatch, y: &MaskBatch) -> Overlap {
    let k_classes = s.k_classes;
    let mut probs = vec![0.0; s.scores.len()];
    let mut tp = vec![0.0; k_classes];
    let mut p_sum = vec![0.0; k_classes];
    let mut g_sum = vec![0.0; k_classes];
    for i in 0..s.n_pixels {
        if y.is_ignored(i) {
            continue;
        }
        let label = y.labels[i] as usize;
        let p = &mut probs[i * k_classes..(i + 1) * k_classes];
        softmax_row(s.row(i), p);
        for k in 0..k_classes {
            p_sum[k] += p[k];
        }
        tp[label] += p[label];
        g_sum[label] += 1.0;
    }
    Overlap {
        probs,
        tp,
        p_sum,
        g_sum,
    }
}

/// Maps `dL/dp` (pixel-major) to `dL/ds` through each pixel's softmax.
fn softmax_backward(s: &ScoreBatch, y: &MaskBatch, probs: &[f64], dl_dp: &[f64]) -> Vec<f64> {
    let k_classes = s.k_classes;
    let mut grad = vec![0.0; s.scores.len()];
    for i in 0..s.n_pixels {
        if y.is_ignored(i) {
            continue;
        }
        let range = i * k_classes..(i + 1) * k_classes;
        let p = &probs[range.clone()];
        let d = &dl_dp[range.clone()];
        let dot: f64 = p.iter().zip(d).map(|(a, b)| a * b).sum();
        for (g, (&pj, &dj)) in grad[range].iter_mut().zip(p.iter().zip(d)) {
            *g = pj * (dj - dot);
        }
    }
    grad
}

/// `1 - (1/K) sum_k (2 TP_k + eps) / (sum p_k + sum g_k + eps)`.
pub fn soft_dice(s: &ScoreBatch, y: &MaskBatch, eps: f64) -> Result<LossResult> {
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::Domain(format!("eps must be >= 0, got {eps}")));
    }
    prepare(s, y)?;
    let k_classes = s.k_classes;
    let o = overlap(s, y);
    let kf = k_classes as f64;
    let mut per_class = vec![(0.0, 0.0); k_classes];
    let mut d_num = vec![0.0; k_classes];
    let mut d_den = vec![0.0; k_classes];
    for k in 0..k_classes {
        let num = 2.0 * o.tp[k] + eps;
        let den = o.p_sum[k] + o.g_sum[k] + eps;
        if den == 0.0 {
            // Class absent everywhere with eps = 0: count it as perfectly matched.
            per_class[k].0 = 0.0;
            continue;
        }
        per_class[k].0 = (1.0 - num / den) / kf;
        // dL/dTP and dL/dP_sum for this class.
        d_num[k] = -2.0 / (den * kf);
        d_den[k] = num / (den * den * kf);
    }
    let mut dl_dp = vec![0.0; s.scores.len()];
    for i in 0..s.n_pixels {
        if y.is_ignored(i) {
            continue;
        }
        let label = y.labels[i] as usize;
        for k in 0..k_classes {
            let g = if k == label { 1.0 } else { 0.0 };
            dl_dp[i * k_classes + k] = d_num[k] * g + d_den[k];
        }
    }
    let grad = softmax_backward(s, y, &o.probs, &dl_dp);
    let value = per_class.iter().map(|p| p.0).sum();
    Ok(LossResult { value, grad, per_class })
}

/// `1 - (1/K) sum_k (TP + eps) / (TP + alpha FP + beta FN + eps)`, with `alpha`
/// weighting false positives and `beta` false negatives.
pub fn tversky(s: &ScoreBatch, y: &MaskBatch, alpha: f64, beta: f64, eps: f64) -> Result<LossResult> {
    if !(alpha >= 0.0 && beta >= 0.0 && eps >= 0.0) {
        return Err(Error::Domain(format!(
            "tversky needs alpha, beta, eps >= 0 (got {alpha}, {beta}, {eps})"
        )));
    }
    prepare(s, y)?;
    let k_classes = s.k_classes;
    let o = overlap(s, y);
    let kf = k_classes as f64;
    let mut per_class = vec![(0.0, 0.0); k_classes];
    // Index value T = TP + eps over D = TP + a FP + b FN + eps, with
    // FP = P - TP and FN = G - TP, so D = (1 - a - b) TP + a P + b G + eps.
    let mut d_tp = vec![0.0; k_classes];
    let mut d_p = vec![0.0; k_classes];
    for k in 0..k_classes {
        let (tp, p, g) = (o.tp[k], o.p_sum[k], o.g_sum[k]);
        let num = tp + eps;
        let den = (1.0 - alpha - beta) * tp + alpha * p + beta * g + eps;
        if den == 0.0 {
            continue;
        }
        per_class[k].0 = (1.0 - num / den) / kf;
        let dden_dtp = 1.0 - alpha - beta;
        d_tp[k] = -(den - num * dden_dtp) / (den * den * kf);
        d_p[k] = num * alpha / (den * den * kf);
    }
    let mut dl_dp = vec![0.0; s.scores.len()];
    for i in 0..s.n_pixels {
        if y.is_ignored(i) {
            continue;
        }
        let label = y.labels[i] as usize;
        for k in 0..k_classes {
            let g = if k == label { 1.0 } else { 0.0 };
            dl_dp[i * k_classes + k] = d_tp[k] * g + d_p[k];
        }
    }
    let grad = softmax_backward(s, y, &o.probs, &dl_dp);
    let value = per_class.iter().map(|p| p.0).sum();
    Ok(LossResult { value, grad, per_class })
}
