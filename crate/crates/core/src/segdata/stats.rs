use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::MaskBatch;
use crate::error::{Error, Result};
use crate::fmt::g12;

/// Per-class pixel counts over a dataset, ignore pixels excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelStats {
    pub n_total: u64,
    pub n_per_class: Vec<u64>,
    pub p_per_class: Vec<f64>,
}

impl LabelStats {
    pub fn from_counts(n_per_class: Vec<u64>) -> Result<Self> {
        if n_per_class.is_empty() {
            return Err(Error::Stats("no classes".into()));
        }
        let n_total: u64 = n_per_class.iter().sum();
        if n_total == 0 {
            return Err(Error::Stats("empty effective dataset".into()));
        }
        let p_per_class = n_per_class.iter().map(|&n| n as f64 / n_total as f64).collect();
        Ok(Self {
            n_total,
            n_per_class,
            p_per_class,
        })
    }

    pub fn k_classes(&self) -> usize {
        self.n_per_class.len()
    }

    /// Same class proportions with every count multiplied by `c` (rounded).
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::Domain(format!("scale factor must be positive, got {c}")));
        }
        Self::from_counts(
            self.n_per_class
                .iter()
                .map(|&n| (n as f64 * c).round() as u64)
                .collect(),
        )
    }
}

/// Exact per-class counts over every mask; `ignore_index` pixels are skipped.
pub fn accumulate_stats(masks: &[MaskBatch], k_classes: usize) -> Result<LabelStats> {
    if k_classes == 0 {
        return Err(Error::Config("k_classes must be positive".into()));
    }
    let mut counts = vec![0u64; k_classes];
    let mut image_base = 0;
    for batch in masks {
        let m = batch.pixels_per_image().max(1);
        for (i, &l) in batch.labels.iter().enumerate() {
            if l == batch.ignore_index {
                continue;
            }
            match counts.get_mut(l as usize) {
                Some(c) => *c += 1,
                None => {
                    return Err(Error::Data {
                        image: image_base + i / m,
                        offset: i % m,
                        msg: format!("label {l} >= K = {k_classes}"),
                    })
                }
            }
        }
        image_base += batch.n_images;
    }
    LabelStats::from_counts(counts)
}

pub const STATS_HEADER: [&str; 3] = ["class_index", "n_pixels", "p_k"];

pub fn write_stats_csv(stats: &LabelStats, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|e| Error::io_at(path, e))?;
    writeln!(f, "{}", STATS_HEADER.join(","))?;
    for (k, (&n, &p)) in stats.n_per_class.iter().zip(&stats.p_per_class).enumerate() {
        writeln!(f, "{k},{n},{}", g12(p))?;
    }
    Ok(())
}

/// Reads counts back; `p_k` is recomputed from the counts, not trusted.
pub fn read_stats_csv(path: impl AsRef<Path>) -> Result<LabelStats> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_reader(File::open(path).map_err(|e| Error::io_at(path, e))?);
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != STATS_HEADER {
        return Err(Error::format("header", format!("expected {}", STATS_HEADER.join(","))));
    }
    let mut counts = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let idx: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::format("class_index", format!("row {row}: not an integer")))?;
        if idx != row {
            return Err(Error::format(
                "class_index",
                format!("row {row}: expected {row}, found {idx}"),
            ));
        }
        let n: u64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::format("n_pixels", format!("row {row}: not an integer")))?;
        counts.push(n);
    }
    LabelStats::from_counts(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_count() {
        let mut labels = vec![0u8; 90];
        labels.extend(std::iter::repeat_n(1, 10));
        let m = MaskBatch::new(labels, 10, 10, 1).unwrap();
        let s = accumulate_stats(&[m], 2).unwrap();
        assert_eq!(s.n_total, 100);
        assert_eq!(s.n_per_class, vec![90, 10]);
        assert_eq!(s.p_per_class, vec![0.9, 0.1]);
    }

    #[test]
    fn all_ignored_is_empty() {
        let m = MaskBatch::new(vec![255; 4], 2, 2, 1).unwrap();
        let err = accumulate_stats(&[m], 2).unwrap_err();
        assert!(err.to_string().contains("empty effective dataset"));
    }

    #[test]
    fn invalid_label_reports_location_across_batches() {
        let a = MaskBatch::new(vec![0; 4], 2, 2, 1).unwrap();
        let b = MaskBatch::new(vec![0, 0, 0, 0, 1, 0, 7, 0], 2, 2, 2).unwrap();
        match accumulate_stats(&[a, b], 2) {
            Err(Error::Data { image, offset, .. }) => assert_eq!((image, offset), (2, 2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ignore_pixels_are_excluded() {
        let m = MaskBatch::new(vec![0, 255, 1, 255], 2, 2, 1).unwrap();
        let s = accumulate_stats(&[m], 2).unwrap();
        assert_eq!(s.n_total, 2);
        assert_eq!(s.n_per_class, vec![1, 1]);
    }

    #[test]
    fn csv_round_trip() {
        let s = LabelStats::from_counts(vec![912, 49, 14, 16, 9]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stats.csv");
        write_stats_csv(&s, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("class_index,n_pixels,p_k\n0,912,0.912\n"));
        assert_eq!(read_stats_csv(&p).unwrap(), s);
    }
}
