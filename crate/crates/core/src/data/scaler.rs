use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{Dataset, SequencePair};
use crate::error::{Error, Result};

/// Per-channel min-max map onto `[0, 1]`. A constant channel maps to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMax {
    pub fn fit<'a>(series: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Self> {
        let mut min: Vec<f64> = Vec::new();
        let mut max: Vec<f64> = Vec::new();
        for a in series {
            if min.is_empty() {
                min = vec![f64::INFINITY; a.ncols()];
                max = vec![f64::NEG_INFINITY; a.ncols()];
            }
            if a.ncols() != min.len() {
                return Err(Error::Data("channel count varies across sequences".into()));
            }
            for (k, col) in a.axis_iter(Axis(1)).enumerate() {
                for &v in col {
                    min[k] = min[k].min(v);
                    max[k] = max[k].max(v);
                }
            }
        }
        if min.is_empty() {
            return Err(Error::Data("cannot fit a scaler on an empty split".into()));
        }
        if min.iter().chain(&max).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite values in scaler fit".into()));
        }
        Ok(MinMax { min, max })
    }

    pub fn apply(&self, a: &Array2<f64>) -> Array2<f64> {
        let mut out = a.clone();
        for (k, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let range = self.max[k] - self.min[k];
            let lo = self.min[k];
            if range > 0.0 {
                col.mapv_inplace(|v| (v - lo) / range);
            } else {
                col.fill(0.0);
            }
        }
        out
    }

    pub fn invert(&self, a: &Array2<f64>) -> Array2<f64> {
        let mut out = a.clone();
        for (k, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let range = self.max[k] - self.min[k];
            let lo = self.min[k];
            col.mapv_inplace(|v| lo + v * range);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScaler {
    pub x: MinMax,
    pub y: MinMax,
}

impl PairScaler {
    /// Fits on `train` only.
    pub fn fit(train: &Dataset) -> Result<Self> {
        Ok(PairScaler {
            x: MinMax::fit(train.pairs.iter().map(|p| &p.x))?,
            y: MinMax::fit(train.pairs.iter().map(|p| &p.y))?,
        })
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        Dataset {
            pairs: ds
                .pairs
                .iter()
                .map(|p| SequencePair {
                    x: self.x.apply(&p.x),
                    y: self.y.apply(&p.y),
                    subject_id: p.subject_id.clone(),
                    profile: p.profile,
                })
                .collect(),
        }
    }
}
