//! Confusion counts, IoU-family metrics and the empirical IoU lower bound.
//!
//! With `N` evaluated pixels, `P_k = N_k / N` is the class frequency,
//! `P_k0` the fraction of class-`k` pixels predicted as something else and
//! `P_0k` the fraction of other pixels predicted as `k`. Then
//! `IoU_k = (P_k - P_k0) / (P_k + P_0k)`, which equals `TP / (TP + FP + FN)`.
//!
//! The lower bound replaces `P_k0` and `P_0k` by their rho-margin upper
//! bounds `l_k0` and `l_0k`.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fmt::g12;
use crate::losses::{compute_margins_lambda, ScoreBatch};
use crate::margins::MarginOffsets;
use crate::segdata::{LabelStats, MaskBatch};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    /// Evaluated (non-ignored) pixels.
    pub total: u64,
}

impl ConfusionCounts {
    pub fn zeros(k_classes: usize) -> Self {
        Self {
            tp: vec![0; k_classes],
            fp: vec![0; k_classes],
            fn_: vec![0; k_classes],
            total: 0,
        }
    }

    pub fn k_classes(&self) -> usize {
        self.tp.len()
    }

    /// Adds another batch's counts.
    pub fn merge(&mut self, other: &ConfusionCounts) {
        for k in 0..self.k_classes() {
            self.tp[k] += other.tp[k];
            self.fp[k] += other.fp[k];
            self.fn_[k] += other.fn_[k];
        }
        self.total += other.total;
    }
}

pub fn confusion(pred: &MaskBatch, truth: &MaskBatch, k_classes: usize) -> Result<ConfusionCounts> {
    if pred.n_pixels() != truth.n_pixels() {
        return Err(Error::Shape(format!(
            "{} predicted vs {} true pixels",
            pred.n_pixels(),
            truth.n_pixels()
        )));
    }
    truth.validate(k_classes)?;
    let mut c = ConfusionCounts::zeros(k_classes);
    for (i, (&p, &t)) in pred.labels.iter().zip(&truth.labels).enumerate() {
        if t == truth.ignore_index {
            continue;
        }
        let (p, t) = (p as usize, t as usize);
        if p >= k_classes {
            let m = pred.pixels_per_image().max(1);
            return Err(Error::Data {
                image: i / m,
                offset: i % m,
                msg: format!("predicted label {p} >= K = {k_classes}"),
            });
        }
        c.total += 1;
        if p == t {
            c.tp[t] += 1;
        } else {
            c.fn_[t] += 1;
            c.fp[p] += 1;
        }
    }
    Ok(c)
}

/// Whether the lower-bound normalizer `N` is a whole dataset or one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundScope {
    Dataset,
    Batch,
}

impl BoundScope {
    pub fn label(self) -> &'static str {
        match self {
            BoundScope::Dataset => "dataset-scope",
            BoundScope::Batch => "batch-scope",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowerBound {
    pub scope: BoundScope,
    pub l_k0: Vec<f64>,
    pub l_0k: Vec<f64>,
    pub iou_lower_per_class: Vec<f64>,
    pub miou_lower: f64,
    /// `P_k0 <= l_k0`, `P_0k <= l_0k` and lower IoU <= IoU for every class.
    pub sandwich_holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// `TP / (TP + FP + FN)`; NaN for classes absent from truth and prediction.
    pub iou_per_class: Vec<f64>,
    /// `(P_k - P_k0) / (P_k + P_0k)`, the same quantity via frequencies.
    pub iou_prob_form: Vec<f64>,
    pub miou: f64,
    pub dsc_per_class: Vec<f64>,
    pub pixel_accuracy: f64,
    pub p_k: Vec<f64>,
    pub p_k0: Vec<f64>,
    pub p_0k: Vec<f64>,
    /// Classes excluded from the mean because they never occur.
    pub absent: Vec<bool>,
    pub lower: Option<LowerBound>,
}

pub fn iou_report(counts: &ConfusionCounts) -> MetricsReport {
    let k_classes = counts.k_classes();
    let n = counts.total as f64;
    let mut report = MetricsReport {
        iou_per_class: Vec::with_capacity(k_classes),
        iou_prob_form: Vec::with_capacity(k_classes),
        miou: f64::NAN,
        dsc_per_class: Vec::with_capacity(k_classes),
        pixel_accuracy: if counts.total > 0 {
            counts.tp.iter().sum::<u64>() as f64 / n
        } else {
            f64::NAN
        },
        p_k: Vec::with_capacity(k_classes),
        p_k0: Vec::with_capacity(k_classes),
        p_0k: Vec::with_capacity(k_classes),
        absent: Vec::with_capacity(k_classes),
        lower: None,
    };
    let mut sum = 0.0;
    let mut present = 0usize;
    for k in 0..k_classes {
        let (tp, fp, fn_) = (counts.tp[k], counts.fp[k], counts.fn_[k]);
        let p_k = (tp + fn_) as f64 / n;
        let p_k0 = fn_ as f64 / n;
        let p_0k = fp as f64 / n;
        report.p_k.push(p_k);
        report.p_k0.push(p_k0);
        report.p_0k.push(p_0k);
        let union = tp + fp + fn_;
        if union == 0 {
            report.absent.push(true);
            report.iou_per_class.push(f64::NAN);
            report.iou_prob_form.push(f64::NAN);
            report.dsc_per_class.push(f64::NAN);
            continue;
        }
        report.absent.push(false);
        let iou = tp as f64 / union as f64;
        report.iou_per_class.push(iou);
        report.iou_prob_form.push((p_k - p_k0) / (p_k + p_0k));
        report.dsc_per_class.push(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64);
        sum += iou;
        present += 1;
    }
    if present > 0 {
        report.miou = sum / present as f64;
    }
    report
}

/// Evaluates `l_k0 = (1/N) sum_{i in Y_k} phi_{rho_k0}(lambda_ik)`,
/// `l_0k = (1/N) sum_{i not in Y_k} phi_{rho_0k}(-lambda_ik)` and the
/// resulting lower bound `(P_k - l_k0) / (P_k + l_0k)` per class.
///
/// `stats` must describe exactly the scored pixels; predictions for the
/// ordinary metrics are the raw-score arg-max.
pub fn lower_bound_report(
    s: &ScoreBatch,
    y: &MaskBatch,
    m: &MarginOffsets,
    stats: &LabelStats,
    scope: BoundScope,
) -> Result<MetricsReport> {
    let k_classes = s.k_classes;
    if m.k_classes() != k_classes || stats.k_classes() != k_classes {
        return Err(Error::Shape("scores, offsets and stats disagree on K".into()));
    }
    if y.n_pixels() != s.n_pixels {
        return Err(Error::Shape(format!(
            "{} score pixels vs {} labels",
            s.n_pixels,
            y.n_pixels()
        )));
    }
    let n_valid = y.n_valid() as u64;
    if n_valid != stats.n_total {
        return Err(Error::Shape(format!(
            "stats cover {} pixels but {n_valid} labelled pixels were scored",
            stats.n_total
        )));
    }
    s.check_finite()?;
    let lambda = compute_margins_lambda(s)?;
    let pred = MaskBatch {
        labels: s.argmax(),
        ..y.clone()
    };
    let mut report = iou_report(&confusion(&pred, y, k_classes)?);

    let mut l_k0 = vec![0.0; k_classes];
    let mut l_0k = vec![0.0; k_classes];
    for i in 0..s.n_pixels {
        if y.is_ignored(i) {
            continue;
        }
        let label = y.labels[i] as usize;
        for k in 0..k_classes {
            let lam = lambda[i * k_classes + k];
            if k == label {
                l_k0[k] += crate::losses::rho_margin_loss(lam, m.rho_k0[k])?;
            } else {
                l_0k[k] += crate::losses::rho_margin_loss(-lam, m.rho_0k[k])?;
            }
        }
    }
    let n = stats.n_total as f64;
    let mut iou_lower = Vec::with_capacity(k_classes);
    let mut sandwich = true;
    for k in 0..k_classes {
        l_k0[k] /= n;
        l_0k[k] /= n;
        let p_k = stats.p_per_class[k];
        let den = p_k + l_0k[k];
        if den == 0.0 {
            return Err(Error::DegenerateBound(k));
        }
        let lower = (p_k - l_k0[k]) / den;
        iou_lower.push(lower);
        sandwich &= report.p_k0[k] <= l_k0[k] && report.p_0k[k] <= l_0k[k];
        if !report.absent[k] {
            sandwich &= lower <= report.iou_per_class[k];
        }
    }
    let miou_lower = iou_lower.iter().sum::<f64>() / k_classes as f64;
    report.lower = Some(LowerBound {
        scope,
        l_k0,
        l_0k,
        iou_lower_per_class: iou_lower,
        miou_lower,
        sandwich_holds: sandwich,
    });
    Ok(report)
}

pub const METRICS_HEADER: &str = "class_index,iou,dsc,p_k,p_k0,p_0k,iou_lower";

/// Writes per-class rows then `miou`, `miou_lower` and `pixel_acc` rows.
/// Missing lower-bound values are left empty.
pub fn write_metrics_csv(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|e| Error::io_at(path, e))?;
    f.write_all(metrics_csv_string(report).as_bytes())?;
    Ok(())
}

pub fn metrics_csv_string(report: &MetricsReport) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    let lower = report.lower.as_ref();
    for k in 0..report.iou_per_class.len() {
        let lo = lower.map(|l| g12(l.iou_lower_per_class[k])).unwrap_or_default();
        out.push_str(&format!(
            "{k},{},{},{},{},{},{lo}\n",
            g12(report.iou_per_class[k]),
            g12(report.dsc_per_class[k]),
            g12(report.p_k[k]),
            g12(report.p_k0[k]),
            g12(report.p_0k[k]),
        ));
    }
    out.push_str(&format!("miou,{},,,,,\n", g12(report.miou)));
    let ml = lower.map(|l| g12(l.miou_lower)).unwrap_or_default();
    out.push_str(&format!("miou_lower,{ml},,,,,\n"));
    out.push_str(&format!("pixel_acc,{},,,,,\n", g12(report.pixel_accuracy)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::margins::compute_margins;

    fn counts(tp: u64, fp: u64, fn_: u64, total: u64) -> ConfusionCounts {
        ConfusionCounts {
            tp: vec![tp],
            fp: vec![fp],
            fn_: vec![fn_],
            total,
        }
    }

    #[test]
    fn perfect_prediction() {
        let t = MaskBatch::from_labels(vec![0, 1, 2, 1, 255]);
        let c = confusion(&t, &t, 3).unwrap();
        assert_eq!(c.fp, vec![0, 0, 0]);
        assert_eq!(c.fn_, vec![0, 0, 0]);
        assert_eq!(c.total, 4);
        let r = iou_report(&c);
        assert_eq!(r.iou_per_class, vec![1.0, 1.0, 1.0]);
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn disjoint_class_has_zero_iou() {
        let t = MaskBatch::from_labels(vec![0, 0, 1, 1]);
        let p = MaskBatch::from_labels(vec![1, 1, 0, 0]);
        let r = iou_report(&confusion(&p, &t, 2).unwrap());
        assert_eq!(r.iou_per_class, vec![0.0, 0.0]);
    }

    #[test]
    fn direct_formula() {
        let r = iou_report(&counts(8, 1, 1, 20));
        assert!((r.iou_per_class[0] - 0.8).abs() < 1e-15);
        assert!((r.dsc_per_class[0] - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn probability_form_scalar_example() {
        // N = 100, N_k = 10, P_k0 = 0.02, P_0k = 0.03.
        let r = iou_report(&counts(8, 3, 2, 100));
        assert!((r.iou_prob_form[0] - 0.08 / 0.13).abs() < 1e-12);
        assert!((r.iou_per_class[0] - 0.615385).abs() < 1e-6);
    }

    #[test]
    fn absent_classes_are_excluded_from_mean() {
        let c = ConfusionCounts {
            tp: vec![1, 1, 0],
            fp: vec![1, 1, 0],
            fn_: vec![1, 1, 0],
            total: 6,
        };
        let r = iou_report(&c);
        assert!(r.iou_per_class[2].is_nan() && r.absent[2]);
        assert!((r.miou - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let a = MaskBatch::from_labels(vec![0; 3]);
        let b = MaskBatch::from_labels(vec![0; 4]);
        assert!(matches!(confusion(&a, &b, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn separated_scores_reach_one() {
        let stats = LabelStats::from_counts(vec![2, 1, 1]).unwrap();
        let m = compute_margins(&stats, 1.0, 1.0).unwrap();
        let big = 100.0;
        let s = ScoreBatch::new(vec![big, 0.0, 0.0, big, 0.0, 0.0, 0.0, big, 0.0, 0.0, 0.0, big], 4, 3).unwrap();
        let y = MaskBatch::from_labels(vec![0, 0, 1, 2]);
        let r = lower_bound_report(&s, &y, &m, &stats, BoundScope::Batch).unwrap();
        let lb = r.lower.unwrap();
        assert_eq!(lb.l_k0, vec![0.0; 3]);
        assert_eq!(lb.l_0k, vec![0.0; 3]);
        assert_eq!(lb.iou_lower_per_class, vec![1.0; 3]);
        assert!(lb.sandwich_holds);
    }

    #[test]
    fn zero_scores_give_zero_lower_bound() {
        let stats = LabelStats::from_counts(vec![3, 1]).unwrap();
        let m = compute_margins(&stats, 10.0, 1.0).unwrap();
        let s = ScoreBatch::new(vec![0.0; 8], 4, 2).unwrap();
        let y = MaskBatch::from_labels(vec![0, 0, 0, 1]);
        let r = lower_bound_report(&s, &y, &m, &stats, BoundScope::Dataset).unwrap();
        let lb = r.lower.unwrap();
        for k in 0..2 {
            assert!((lb.l_k0[k] - stats.p_per_class[k]).abs() < 1e-15);
            assert_eq!(lb.iou_lower_per_class[k], 0.0);
        }
    }

    #[test]
    fn stats_must_cover_scored_pixels() {
        let stats = LabelStats::from_counts(vec![30, 10]).unwrap();
        let m = compute_margins(&stats, 10.0, 1.0).unwrap();
        let s = ScoreBatch::new(vec![0.0; 8], 4, 2).unwrap();
        let y = MaskBatch::from_labels(vec![0, 0, 0, 1]);
        assert!(matches!(
            lower_bound_report(&s, &y, &m, &stats, BoundScope::Dataset),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn csv_layout() {
        let r = iou_report(&counts(8, 1, 1, 20));
        let text = metrics_csv_string(&r);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines[1], "0,0.8,0.888888888889,0.45,0.05,0.05,");
        assert_eq!(lines[2], "miou,0.8,,,,,");
        assert_eq!(lines[3], "miou_lower,,,,,,");
        assert_eq!(lines[4], "pixel_acc,0.4,,,,,");
    }
}
