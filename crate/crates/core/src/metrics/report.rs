//! Per-fold metric rows, their aggregation and tabular output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Alignment method or ablation variant that produced the run.
    pub variant: String,
    pub modality_pair: String,
    /// `X|Y` or `Y|X`.
    pub direction: String,
    pub fold_index: usize,
    /// `train` or `test`.
    pub split: String,
    pub mse: f64,
    pub fid: f64,
    pub predictive: Option<f64>,
    pub predictive_ratio: Option<f64>,
    pub probe_linear: Option<f64>,
    pub probe_nonlinear: Option<f64>,
    pub latent_correlation: Option<f64>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let opt = [
            self.predictive,
            self.predictive_ratio,
            self.probe_linear,
            self.probe_nonlinear,
            self.latent_correlation,
        ];
        if !self.mse.is_finite() || !self.fid.is_finite() || opt.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite metric in {self:?}")));
        }
        if self.fid < 0.0 {
            return Err(Error::Numerical(format!("negative FID {}", self.fid)));
        }
        for acc in [self.probe_linear, self.probe_nonlinear].into_iter().flatten() {
            if !(0.0..=1.0).contains(&acc) {
                return Err(Error::Numerical(format!("probe accuracy {acc} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<MeanStd> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std, n })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let p = f.precision().unwrap_or(3);
        write!(f, "{:.p$}±{:.p$}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub variant: String,
    pub modality_pair: String,
    pub direction: String,
    pub split: String,
    pub folds: usize,
    pub mse: MeanStd,
    pub fid: MeanStd,
    pub predictive: Option<MeanStd>,
    pub predictive_ratio: Option<MeanStd>,
    pub probe_linear: Option<MeanStd>,
    pub probe_nonlinear: Option<MeanStd>,
    pub latent_correlation: Option<MeanStd>,
}

fn collect(rows: &[&MetricsReport], f: impl Fn(&MetricsReport) -> Option<f64>) -> Option<MeanStd> {
    let vals: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
    MeanStd::of(&vals)
}

/// Groups rows by (variant, pair, direction, split) in sorted order and
/// summarizes each metric across folds.
pub fn aggregate(reports: &[MetricsReport]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, String, String, String), Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        groups
            .entry((
                r.variant.clone(),
                r.modality_pair.clone(),
                r.direction.clone(),
                r.split.clone(),
            ))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((variant, modality_pair, direction, split), rows)| AggregateRow {
            folds: rows.len(),
            mse: collect(&rows, |r| Some(r.mse)).expect("non-empty group"),
            fid: collect(&rows, |r| Some(r.fid)).expect("non-empty group"),
            predictive: collect(&rows, |r| r.predictive),
            predictive_ratio: collect(&rows, |r| r.predictive_ratio),
            probe_linear: collect(&rows, |r| r.probe_linear),
            probe_nonlinear: collect(&rows, |r| r.probe_nonlinear),
            latent_correlation: collect(&rows, |r| r.latent_correlation),
            variant,
            modality_pair,
            direction,
            split,
        })
        .collect()
}

pub fn write_reports_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    for r in reports {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports_csv(path: &Path) -> Result<Vec<MetricsReport>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

fn cell(v: Option<MeanStd>) -> String {
    v.map_or_else(|| "n/a".to_string(), |m| m.to_string())
}

/// Markdown table, one line per aggregate row.
pub fn markdown_table(rows: &[AggregateRow]) -> String {
    let mut out = String::from(
        "| variant | pair | direction | split | folds | MSE ↓ | FID ↓ | Pred ↓ | Pred ratio | Linear probe ↑ | Nonlinear probe ↑ | CKA ↑ |\n\
         |---|---|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.variant,
            r.modality_pair,
            r.direction,
            r.split,
            r.folds,
            r.mse,
            r.fid,
            cell(r.predictive),
            cell(r.predictive_ratio),
            cell(r.probe_linear),
            cell(r.probe_nonlinear),
            cell(r.latent_correlation),
        );
    }
    out
}

pub fn write_markdown(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    std::fs::write(path, markdown_table(rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(fold: usize, mse: f64) -> MetricsReport {
        MetricsReport {
            variant: "llma".into(),
            modality_pair: "x-y".into(),
            direction: "X|Y".into(),
            fold_index: fold,
            split: "test".into(),
            mse,
            fid: 1.0,
            predictive: None,
            predictive_ratio: None,
            probe_linear: Some(0.5),
            probe_nonlinear: Some(0.6),
            latent_correlation: Some(0.9),
        }
    }

    #[test]
    fn mean_std_format() {
        let m = MeanStd::of(&[0.12, 0.16]).unwrap();
        assert_eq!(format!("{m:.2}"), "0.14±0.03");
        assert_eq!(MeanStd::of(&[2.0]).unwrap().std, 0.0);
        assert!(MeanStd::of(&[]).is_none());
    }

    #[test]
    fn aggregate_groups_folds() {
        let mut rows = vec![row(0, 0.1), row(1, 0.3)];
        let mut other = row(0, 5.0);
        other.direction = "Y|X".into();
        rows.push(other);
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 2);
        assert_eq!(agg[0].direction, "X|Y");
        assert_eq!(agg[0].folds, 2);
        assert!((agg[0].mse.mean - 0.2).abs() < 1e-12);
        assert!(agg[0].predictive.is_none());
        assert!(markdown_table(&agg).contains("0.200±0.141"));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rows = vec![row(0, 0.1), row(1, 0.25)];
        write_reports_csv(&path, &rows).unwrap();
        assert_eq!(read_reports_csv(&path).unwrap(), rows);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut r = row(0, 0.1);
        assert!(r.validate().is_ok());
        r.probe_linear = Some(1.5);
        assert!(r.validate().is_err());
        let mut r = row(0, f64::NAN);
        assert!(r.validate().is_err());
        r.mse = 0.0;
        r.fid = -1.0;
        assert!(r.validate().is_err());
    }
}
