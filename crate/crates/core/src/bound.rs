//! The IoU generalization gap as a number, plus checks of the optimal
//! offset allocation.
//!
//! With `F = C(Theta) + sigma`, `sigma = rho_max / (4K) sqrt(2 M ln(2K / eta))`:
//!
//! ```text
//! eps_k = (sqrt(N - N_k) + sqrt(N_k) / mu_k) / (N_k rho_0k / (4 K F) - sqrt(N - N_k))
//! eps   = (1/K) sum_k eps_k
//! ```
//!
//! A class whose denominator is not positive makes the bound vacuous for it;
//! such classes are flagged rather than dropped silently.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fmt::g12;
use crate::margins::{compute_margins, mu_upsilon_form, MarginOffsets};
use crate::segdata::LabelStats;

#[derive(Debug, Clone, PartialEq)]
pub struct BoundConfig {
    pub stats: LabelStats,
    pub margins: MarginOffsets,
    /// Pixels per image, `M`.
    pub m_pixels: u64,
    /// Confidence parameter in (0, 1).
    pub eta: f64,
    /// User-supplied hypothesis complexity `C(Theta)`.
    pub c_theta: f64,
}

impl BoundConfig {
    pub fn k_classes(&self) -> usize {
        self.stats.k_classes()
    }

    fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Domain(format!("eta must lie in (0, 1), got {}", self.eta)));
        }
        if self.m_pixels == 0 {
            return Err(Error::Domain("M must be at least 1".into()));
        }
        if !(self.c_theta >= 0.0 && self.c_theta.is_finite()) {
            return Err(Error::Domain(format!("C(Theta) must be >= 0, got {}", self.c_theta)));
        }
        if self.margins.k_classes() != self.k_classes() {
            return Err(Error::Shape(format!(
                "{} margin classes vs {} stats classes",
                self.margins.k_classes(),
                self.k_classes()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundResult {
    pub sigma: f64,
    pub f_cal: f64,
    pub rho_max: f64,
    /// NaN where the class is vacuous.
    pub eps_per_class: Vec<f64>,
    /// Mean over valid classes of `eps_k`, divided by K.
    pub eps: f64,
    pub valid_per_class: Vec<bool>,
}

impl BoundResult {
    pub fn all_valid(&self) -> bool {
        self.valid_per_class.iter().all(|&v| v)
    }
}

/// `sigma(1/eta) = rho_max / (4K) sqrt(2 M ln(2K / eta))`, natural log.
pub fn sigma(rho_max: f64, k_classes: usize, m_pixels: u64, eta: f64) -> f64 {
    let k = k_classes as f64;
    rho_max / (4.0 * k) * (2.0 * m_pixels as f64 * (2.0 * k / eta).ln()).sqrt()
}

/// Per-class gap terms for a fixed `F`; `None` where the denominator is not positive.
pub fn eps_terms(stats: &LabelStats, rho_0k: &[f64], mu_k: &[f64], f_cal: f64) -> Vec<Option<f64>> {
    let n = stats.n_total as f64;
    let k = stats.k_classes() as f64;
    stats
        .n_per_class
        .iter()
        .enumerate()
        .map(|(c, &count)| {
            let n_k = count as f64;
            let rest = (n - n_k).sqrt();
            let denominator = n_k * rho_0k[c] / (4.0 * k * f_cal) - rest;
            if denominator > 0.0 {
                Some((rest + n_k.sqrt() / mu_k[c]) / denominator)
            } else {
                None
            }
        })
        .collect()
}

fn mean_over_k(terms: &[Option<f64>]) -> f64 {
    terms.iter().flatten().sum::<f64>() / terms.len() as f64
}

pub fn evaluate_epsilon(cfg: &BoundConfig) -> Result<BoundResult> {
    cfg.validate()?;
    let k_classes = cfg.k_classes();
    let rho_max = cfg.margins.rho_max();
    let sigma = sigma(rho_max, k_classes, cfg.m_pixels, cfg.eta);
    let f_cal = cfg.c_theta + sigma;
    let terms = eps_terms(&cfg.stats, &cfg.margins.rho_0k, &cfg.margins.mu_k, f_cal);
    if terms.iter().all(Option::is_none) {
        return Err(Error::VacuousBound);
    }
    Ok(BoundResult {
        sigma,
        f_cal,
        rho_max,
        eps_per_class: terms.iter().map(|t| t.unwrap_or(f64::NAN)).collect(),
        eps: mean_over_k(&terms),
        valid_per_class: terms.iter().map(Option::is_some).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingOutcome {
    /// `None` when the configuration is vacuous for some class.
    pub eps_before: Option<f64>,
    pub eps_after: Option<f64>,
    /// `Some(eps_after < eps_before)` when both are valid.
    pub decreased: Option<bool>,
}

fn full_eps(cfg: &BoundConfig) -> Result<Option<f64>> {
    match evaluate_epsilon(cfg) {
        Ok(r) if r.all_valid() => Ok(Some(r.eps)),
        Ok(_) | Err(Error::VacuousBound) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Multiplies every class count by `c`, recomputes the offsets with the same
/// `tau` and `upsilon`, and compares the gap before and after.
pub fn scaling_check(cfg: &BoundConfig, c: f64) -> Result<ScalingOutcome> {
    if !(c >= 1.0 && c.is_finite()) {
        return Err(Error::Domain(format!("scale factor must be >= 1, got {c}")));
    }
    let eps_before = full_eps(cfg)?;
    let stats = cfg.stats.scaled(c)?;
    let margins = compute_margins(&stats, cfg.margins.tau, cfg.margins.upsilon)?;
    let scaled = BoundConfig {
        stats,
        margins,
        ..cfg.clone()
    };
    let eps_after = full_eps(&scaled)?;
    let decreased = match (eps_before, eps_after) {
        (Some(b), Some(a)) => Some(a < b),
        _ => None,
    };
    Ok(ScalingOutcome {
        eps_before,
        eps_after,
        decreased,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationSearch {
    pub best_grid_eps: f64,
    pub best_grid_rho: Vec<f64>,
    pub closed_form_eps: f64,
    pub closed_form_rho: Vec<f64>,
    /// Grid points where every class was non-vacuous.
    pub valid_points: usize,
    pub total_points: usize,
    /// `closed_form_eps <= best_grid_eps * (1 + 1e-9)`.
    pub closed_form_dominates: bool,
}

pub const ALLOCATION_SLACK: f64 = 1e-9;

/// Closed-form allocation of a budget `S = sum_k rho_0k`:
/// `rho_0k = S w_k / sum_j w_j`, `w_k = sqrt(N - N_k) / N_k`.
pub fn closed_form_allocation(stats: &LabelStats, budget: f64) -> Vec<f64> {
    let n = stats.n_total as f64;
    let w: Vec<f64> = stats
        .n_per_class
        .iter()
        .map(|&c| (n - c as f64).sqrt() / c as f64)
        .collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|wk| budget * wk / total).collect()
}

/// Exhaustive search over `rho_0k` on the simplex `sum_k rho_0k = budget`
/// (interior grid with `resolution` steps per free coordinate), with
/// `mu_k` from the upsilon form and `F` held at its closed-form value.
///
/// `base` supplies `M`, `eta`, `C(Theta)` and `upsilon`; its offsets are
/// otherwise ignored.
pub fn brute_force_allocation(base: &BoundConfig, budget: f64, resolution: usize) -> Result<AllocationSearch> {
    base.validate()?;
    let stats = &base.stats;
    let k_classes = stats.k_classes();
    if k_classes < 2 {
        return Err(Error::Config("allocation search needs K >= 2".into()));
    }
    if resolution < 2 {
        return Err(Error::Config("grid resolution must be >= 2".into()));
    }
    let total_points = resolution
        .checked_pow((k_classes - 1) as u32)
        .filter(|&t| t <= 50_000_000)
        .ok_or_else(|| Error::Config(format!("grid of {resolution}^{} points is too large", k_classes - 1)))?;
    let n = stats.n_total as f64;
    let upsilon = base.margins.upsilon;
    let mu: Vec<f64> = stats
        .n_per_class
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            mu_upsilon_form(n, c as f64, upsilon).map_err(|denominator| Error::MuUnderflow {
                class: k,
                denominator,
                min_upsilon: (c as f64 / n) / (n - c as f64).sqrt(),
            })
        })
        .collect::<Result<_>>()?;

    let closed_form_rho = closed_form_allocation(stats, budget);
    let rho_max = closed_form_rho
        .iter()
        .zip(&mu)
        .map(|(r, m)| r.max(r * m))
        .fold(f64::NEG_INFINITY, f64::max);
    let f_cal = base.c_theta + sigma(rho_max, k_classes, base.m_pixels, base.eta);
    let closed_terms = eps_terms(stats, &closed_form_rho, &mu, f_cal);
    if closed_terms.iter().any(Option::is_none) {
        return Err(Error::Search(
            "closed-form allocation is vacuous for this budget".into(),
        ));
    }
    let closed_form_eps = mean_over_k(&closed_terms);

    let step = budget / (resolution + 1) as f64;
    let mut idx = vec![1usize; k_classes - 1];
    let mut rho = vec![0.0; k_classes];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut valid_points = 0;
    for _ in 0..total_points {
        let mut used = 0.0;
        for (d, &i) in idx.iter().enumerate() {
            rho[d] = step * i as f64;
            used += rho[d];
        }
        rho[k_classes - 1] = budget - used;
        if rho[k_classes - 1] > 0.0 {
            let terms = eps_terms(stats, &rho, &mu, f_cal);
            if terms.iter().all(Option::is_some) {
                valid_points += 1;
                let eps = mean_over_k(&terms);
                // Strict comparison keeps the first minimizer in index order.
                if best.as_ref().is_none_or(|(b, _)| eps < *b) {
                    best = Some((eps, rho.clone()));
                }
            }
        }
        // Odometer increment over 1..=resolution.
        for d in (0..idx.len()).rev() {
            if idx[d] < resolution {
                idx[d] += 1;
                break;
            }
            idx[d] = 1;
        }
    }
    let (best_grid_eps, best_grid_rho) = best.ok_or_else(|| Error::Search("every grid point is vacuous".into()))?;
    Ok(AllocationSearch {
        best_grid_eps,
        best_grid_rho,
        closed_form_eps,
        closed_form_rho,
        valid_points,
        total_points,
        closed_form_dominates: closed_form_eps <= best_grid_eps * (1.0 + ALLOCATION_SLACK),
    })
}

/// `mu_k` computed from `r`: `sqrt(N_k) / (r (N / N_k - 1) - sqrt(N - N_k))`.
pub fn mu_r_form(n_total: f64, n_k: f64, r: f64) -> f64 {
    n_k.sqrt() / (r * (n_total / n_k - 1.0) - (n_total - n_k).sqrt())
}

/// Compares the upsilon and `r = N upsilon` forms of `mu_k` for every class.
pub fn reparam_identity_check(stats: &LabelStats, upsilon: f64) -> bool {
    reparam_identity_check_with_r(stats, upsilon, stats.n_total as f64 * upsilon)
}

/// As [`reparam_identity_check`] with an explicit `r`.
pub fn reparam_identity_check_with_r(stats: &LabelStats, upsilon: f64, r: f64) -> bool {
    let n = stats.n_total as f64;
    stats.n_per_class.iter().all(|&c| {
        let n_k = c as f64;
        match mu_upsilon_form(n, n_k, upsilon) {
            Ok(a) => {
                let b = mu_r_form(n, n_k, r);
                ((a - b) / a).abs() <= 1e-12
            }
            Err(_) => false,
        }
    })
}

pub fn write_bound_csv(result: &BoundResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|e| Error::io_at(path, e))?;
    f.write_all(bound_csv_string(result).as_bytes())?;
    Ok(())
}

/// `class_index,eps_k,valid` rows, then `eps`, `sigma`, `f_cal`, `rho_max`.
pub fn bound_csv_string(result: &BoundResult) -> String {
    let mut out = String::from("class_index,eps_k,valid\n");
    for (k, (&e, &v)) in result.eps_per_class.iter().zip(&result.valid_per_class).enumerate() {
        out.push_str(&format!("{k},{},{}\n", g12(e), v));
    }
    for (name, v) in [
        ("eps", result.eps),
        ("sigma", result.sigma),
        ("f_cal", result.f_cal),
        ("rho_max", result.rho_max),
    ] {
        out.push_str(&format!("{name},{},\n", g12(v)));
    }
    out
}
