//! Per-class margin-offsets derived from label statistics.
//!
//! For class `k` with `N_k` of `N` pixels:
//!
//! ```text
//! P_k    = N_k / N
//! mu_k   = P_k sqrt(N_k) / (upsilon (N - N_k) - P_k sqrt(N - N_k))
//! rho_0k = tau sqrt(N - N_k) / N_k
//! rho_k0 = mu_k rho_0k
//! ```
//!
//! This allocation makes `rho_0i / rho_0j = (N_j / N_i) sqrt(N - N_i) / sqrt(N - N_j)`,
//! the condition under which the IoU generalization gap is smallest for a
//! fixed `sum_k rho_0k = tau * sum_k sqrt(N - N_k) / N_k`.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fmt::g12;
use crate::segdata::LabelStats;

pub const DEFAULT_TAU: f64 = 10.0;
pub const DEFAULT_UPSILON: f64 = 1.0;

/// Tolerance for [`verify_corollary_ratios`].
pub const RATIO_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct MarginOffsets {
    /// Background-to-foreground offsets, one per class.
    pub rho_0k: Vec<f64>,
    /// Foreground-to-background offsets, one per class.
    pub rho_k0: Vec<f64>,
    /// `rho_k0 / rho_0k`.
    pub mu_k: Vec<f64>,
    pub tau: f64,
    pub upsilon: f64,
    /// Set when the offsets were loaded from a file and do not follow the
    /// optimal-allocation ratios (manual override).
    pub ratio_warning: bool,
}

impl MarginOffsets {
    pub fn k_classes(&self) -> usize {
        self.rho_0k.len()
    }

    /// Largest offset over both families.
    pub fn rho_max(&self) -> f64 {
        self.rho_0k
            .iter()
            .chain(&self.rho_k0)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Builds offsets from explicit `rho_0k` and `mu_k`, checking the hard
    /// invariants (positive and finite).
    pub fn from_parts(rho_0k: Vec<f64>, mu_k: Vec<f64>, tau: f64, upsilon: f64) -> Result<Self> {
        if rho_0k.len() != mu_k.len() || rho_0k.is_empty() {
            return Err(Error::Shape(format!("{} rho_0k vs {} mu_k", rho_0k.len(), mu_k.len())));
        }
        for (k, (&r, &m)) in rho_0k.iter().zip(&mu_k).enumerate() {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::Domain(format!("rho_0k[{k}] = {r} must be positive and finite")));
            }
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::Domain(format!("mu_k[{k}] = {m} must be positive and finite")));
            }
        }
        let rho_k0 = rho_0k.iter().zip(&mu_k).map(|(r, m)| r * m).collect();
        Ok(Self {
            rho_0k,
            rho_k0,
            mu_k,
            tau,
            upsilon,
            ratio_warning: false,
        })
    }
}

/// `mu_k` from the upsilon form; `Err` carries the non-positive denominator.
pub(crate) fn mu_upsilon_form(n_total: f64, n_k: f64, upsilon: f64) -> std::result::Result<f64, f64> {
    let p = n_k / n_total;
    let rest = n_total - n_k;
    let denominator = upsilon * rest - p * rest.sqrt();
    if denominator > 0.0 {
        Ok(p * n_k.sqrt() / denominator)
    } else {
        Err(denominator)
    }
}

/// Offsets from class counts. Defaults in the literature are `tau = 10`,
/// `upsilon = 1`.
pub fn compute_margins(stats: &LabelStats, tau: f64, upsilon: f64) -> Result<MarginOffsets> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Domain(format!("tau must be positive, got {tau}")));
    }
    if !(upsilon.is_finite() && upsilon > 0.0) {
        return Err(Error::Domain(format!("upsilon must be positive, got {upsilon}")));
    }
    let n = stats.n_total as f64;
    let k_classes = stats.k_classes();
    let mut rho_0k = Vec::with_capacity(k_classes);
    let mut mu_k = Vec::with_capacity(k_classes);
    if let Some(k) = stats.n_per_class.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(k));
    }
    for (k, &count) in stats.n_per_class.iter().enumerate() {
        if count == stats.n_total {
            return Err(Error::SingleClass(k));
        }
        let n_k = count as f64;
        let rest = n - n_k;
        let mu = mu_upsilon_form(n, n_k, upsilon).map_err(|denominator| Error::MuUnderflow {
            class: k,
            denominator,
            min_upsilon: (n_k / n) / rest.sqrt(),
        })?;
        mu_k.push(mu);
        rho_0k.push(tau * rest.sqrt() / n_k);
    }
    MarginOffsets::from_parts(rho_0k, mu_k, tau, upsilon)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioCheck {
    pub holds: bool,
    pub max_rel_deviation: f64,
}

/// Checks both optimal-allocation ratio families against `stats`:
/// pairwise `rho_0i / rho_0j` and `rho_k0 / rho_0k = mu_k(upsilon)`.
pub fn verify_corollary_ratios(m: &MarginOffsets, stats: &LabelStats) -> RatioCheck {
    let k_classes = stats.k_classes();
    if m.k_classes() != k_classes {
        return RatioCheck {
            holds: false,
            max_rel_deviation: f64::INFINITY,
        };
    }
    let n = stats.n_total as f64;
    let counts: Vec<f64> = stats.n_per_class.iter().map(|&c| c as f64).collect();
    let mut worst = 0.0f64;
    let mut note = |actual: f64, expected: f64| {
        let dev = (actual / expected - 1.0).abs();
        worst = if dev.is_nan() { f64::INFINITY } else { worst.max(dev) };
    };
    for i in 0..k_classes {
        for j in 0..k_classes {
            if i == j {
                continue;
            }
            let expected = (counts[j] / counts[i]) * (n - counts[i]).sqrt() / (n - counts[j]).sqrt();
            note(m.rho_0k[i] / m.rho_0k[j], expected);
        }
        match mu_upsilon_form(n, counts[i], m.upsilon) {
            Ok(mu) => note(m.rho_k0[i] / m.rho_0k[i], mu),
            Err(_) => note(f64::NAN, 1.0),
        }
    }
    RatioCheck {
        holds: worst <= RATIO_TOLERANCE,
        max_rel_deviation: worst,
    }
}

pub const MARGINS_HEADER: [&str; 6] = ["class_index", "n_pixels", "p_k", "mu_k", "rho_0k", "rho_k0"];

/// Relative tolerance for `rho_k0 = mu_k rho_0k` after a 12-digit round trip.
const FILE_PRODUCT_TOLERANCE: f64 = 1e-9;

pub fn write_margins_csv(m: &MarginOffsets, stats: &LabelStats, path: impl AsRef<Path>) -> Result<()> {
    if m.k_classes() != stats.k_classes() {
        return Err(Error::Shape(format!(
            "{} margin classes vs {} stats classes",
            m.k_classes(),
            stats.k_classes()
        )));
    }
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|e| Error::io_at(path, e))?;
    writeln!(f, "{}", MARGINS_HEADER.join(","))?;
    for k in 0..m.k_classes() {
        writeln!(
            f,
            "{k},{},{},{},{},{}",
            stats.n_per_class[k],
            g12(stats.p_per_class[k]),
            g12(m.mu_k[k]),
            g12(m.rho_0k[k]),
            g12(m.rho_k0[k])
        )?;
    }
    Ok(())
}

/// Loads offsets written by [`write_margins_csv`] or edited by hand.
///
/// `tau` and `upsilon` are recovered from class 0. Files that break the
/// optimal-allocation ratios load with `ratio_warning` set.
pub fn read_margins_table(path: impl AsRef<Path>) -> Result<(MarginOffsets, LabelStats)> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_reader(File::open(path).map_err(|e| Error::io_at(path, e))?);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != MARGINS_HEADER {
        return Err(Error::format(
            "header",
            format!("expected {}", MARGINS_HEADER.join(",")),
        ));
    }
    let mut counts = Vec::new();
    let mut mu_k = Vec::new();
    let mut rho_0k = Vec::new();
    let mut rho_k0 = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let idx: usize = parse_field(&rec, 0, row)?;
        if idx != row {
            return Err(Error::format(
                "class_index",
                format!("row {row}: expected {row}, found {idx}"),
            ));
        }
        counts.push(parse_field::<u64>(&rec, 1, row)?);
        let reals: Vec<f64> = (3..6)
            .map(|c| parse_field::<f64>(&rec, c, row))
            .collect::<Result<_>>()?;
        for (c, v) in reals.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::format(
                    MARGINS_HEADER[c + 3],
                    format!("row {row}: non-finite value"),
                ));
            }
        }
        mu_k.push(reals[0]);
        rho_0k.push(reals[1]);
        rho_k0.push(reals[2]);
    }
    let stats = LabelStats::from_counts(counts)?;
    for k in 0..rho_0k.len() {
        let product = mu_k[k] * rho_0k[k];
        if ((rho_k0[k] - product) / product).abs() > FILE_PRODUCT_TOLERANCE {
            return Err(Error::format(
                "rho_k0",
                format!("row {k}: rho_k0 = {} differs from mu_k * rho_0k = {product}", rho_k0[k]),
            ));
        }
    }
    let n = stats.n_total as f64;
    let n0 = stats.n_per_class[0] as f64;
    let p0 = n0 / n;
    let tau = rho_0k[0] * n0 / (n - n0).sqrt();
    let upsilon = (p0 * n0.sqrt() / mu_k[0] + p0 * (n - n0).sqrt()) / (n - n0);
    let mut m = MarginOffsets::from_parts(rho_0k, mu_k, tau, upsilon)?;
    // Keep the file's rho_k0 rather than the recomputed product.
    m.rho_k0 = rho_k0;
    m.ratio_warning = !verify_corollary_ratios(&m, &stats).holds;
    Ok((m, stats))
}

pub fn read_margins_csv(path: impl AsRef<Path>) -> Result<MarginOffsets> {
    read_margins_table(path).map(|(m, _)| m)
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, col: usize, row: usize) -> Result<T> {
    rec.get(col)
        .ok_or_else(|| Error::format(MARGINS_HEADER[col], format!("row {row}: missing")))?
        .trim()
        .parse()
        .map_err(|_| Error::format(MARGINS_HEADER[col], format!("row {row}: unparsable")))
}
