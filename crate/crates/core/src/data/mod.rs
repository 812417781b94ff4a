//! Paired sequences, normalization, fold construction, CSV ingestion and the
//! synthetic shared-latent generator.

mod folds;
mod ingest;
pub mod premise;
mod scaler;
mod synthetic;

use std::fs;
use std::path::Path;

use mam_tape::ParamSet;
use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{self, SCHEMA_VERSION};

pub use folds::{make_folds, FoldSpec};
pub use ingest::{canonical_header, convert_to_canonical, ingest_csv, IngestReport, ModalitySchema};
pub use scaler::{MinMax, PairScaler};
pub use synthetic::{generate_synthetic, Dynamics, ObsMap, SyntheticOutput, SyntheticSystem};

/// One paired sample: `x` is `[L, d_X]`, `y` is `[L, d_Y]`, aligned step for
/// step.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePair {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub subject_id: String,
    pub profile: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<SequencePair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetManifest {
    schema_version: u32,
    n_sequences: usize,
    len: usize,
    d_x: usize,
    d_y: usize,
    subjects: Vec<String>,
    profiles: Vec<usize>,
    #[serde(default)]
    source: serde_json::Value,
}

impl Dataset {
    pub fn new(pairs: Vec<SequencePair>) -> Result<Self> {
        let ds = Dataset { pairs };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.pairs.first() else {
            return Ok(());
        };
        let (l, dx, dy) = (first.x.nrows(), first.x.ncols(), first.y.ncols());
        for (i, p) in self.pairs.iter().enumerate() {
            if p.x.nrows() != l || p.y.nrows() != l || p.x.ncols() != dx || p.y.ncols() != dy {
                return Err(Error::Data(format!(
                    "pair {i} has shapes {:?}/{:?}, expected [{l}, {dx}]/[{l}, {dy}]",
                    p.x.dim(),
                    p.y.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `(L, d_X, d_Y)`; zeros for an empty dataset.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.pairs
            .first()
            .map(|p| (p.x.nrows(), p.x.ncols(), p.y.ncols()))
            .unwrap_or((0, 0, 0))
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.pairs.iter().map(|p| p.subject_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn profiles(&self) -> Vec<usize> {
        let mut p: Vec<usize> = self.pairs.iter().map(|p| p.profile).collect();
        p.sort_unstable();
        p.dedup();
        p
    }

    pub fn labels(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.profile).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            pairs: indices.iter().map(|&i| self.pairs[i].clone()).collect(),
        }
    }

    /// Stacks the selected pairs into `([n, L, d_X], [n, L, d_Y])`.
    pub fn stack(&self, indices: &[usize]) -> (Array3<f64>, Array3<f64>) {
        let (l, dx, dy) = self.dims();
        let mut x = Array3::zeros((indices.len(), l, dx));
        let mut y = Array3::zeros((indices.len(), l, dy));
        for (row, &i) in indices.iter().enumerate() {
            x.index_axis_mut(Axis(0), row).assign(&self.pairs[i].x);
            y.index_axis_mut(Axis(0), row).assign(&self.pairs[i].y);
        }
        (x, y)
    }

    pub fn stack_all(&self) -> (Array3<f64>, Array3<f64>) {
        self.stack(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn save(&self, dir: &Path, source: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (l, dx, dy) = self.dims();
        let manifest = DatasetManifest {
            schema_version: SCHEMA_VERSION,
            n_sequences: self.len(),
            len: l,
            d_x: dx,
            d_y: dy,
            subjects: self.pairs.iter().map(|p| p.subject_id.clone()).collect(),
            profiles: self.labels(),
            source,
        };
        let (x, y) = self.stack_all();
        let mut arrays = ParamSet::new();
        arrays.insert("x", x.into_dyn());
        arrays.insert("y", y.into_dyn());
        store::write_arrays(&dir.join("arrays.bin"), &arrays)?;
        store::write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest: DatasetManifest = store::read_manifest(&dir.join("manifest.json"))?;
        let arrays_path = dir.join("arrays.bin");
        let arrays = store::read_arrays(&arrays_path)?;
        let corrupt = |reason: String| Error::Corrupt {
            path: arrays_path.clone(),
            reason,
        };
        let fetch = |name: &str, d: usize| -> Result<Array3<f64>> {
            let t = arrays
                .get(name)
                .ok_or_else(|| corrupt(format!("missing array '{name}'")))?;
            t.clone()
                .into_dimensionality()
                .ok()
                .filter(|a: &Array3<f64>| a.dim() == (manifest.n_sequences, manifest.len, d))
                .ok_or_else(|| corrupt(format!("array '{name}' has shape {:?}", t.shape())))
        };
        let x = fetch("x", manifest.d_x)?;
        let y = fetch("y", manifest.d_y)?;
        if manifest.subjects.len() != manifest.n_sequences || manifest.profiles.len() != manifest.n_sequences {
            return Err(corrupt("metadata length disagrees with n_sequences".into()));
        }
        let pairs = (0..manifest.n_sequences)
            .map(|i| SequencePair {
                x: x.slice(s![i, .., ..]).to_owned(),
                y: y.slice(s![i, .., ..]).to_owned(),
                subject_id: manifest.subjects[i].clone(),
                profile: manifest.profiles[i],
            })
            .collect();
        Dataset::new(pairs)
    }
}
