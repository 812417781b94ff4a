use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// A leave-k-out split: any pair whose subject or profile is held out goes to
/// the test side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub held_out_subjects: Vec<String>,
    pub held_out_profiles: Vec<usize>,
    pub fold_index: usize,
    pub n_folds: usize,
}

impl FoldSpec {
    pub fn is_test(&self, subject: &str, profile: usize) -> bool {
        self.held_out_subjects.iter().any(|s| s == subject) || self.held_out_profiles.contains(&profile)
    }

    /// `(train, test)` indices into `data`.
    pub fn split(&self, data: &Dataset) -> (Vec<usize>, Vec<usize>) {
        (0..data.len()).partition(|&i| {
            let p = &data.pairs[i];
            !self.is_test(&p.subject_id, p.profile)
        })
    }

    pub fn checked_split(&self, data: &Dataset) -> Result<(Vec<usize>, Vec<usize>)> {
        let (train, test) = self.split(data);
        if train.is_empty() || test.is_empty() {
            return Err(Error::Data(format!(
                "fold {} has {} train and {} test sequences",
                self.fold_index,
                train.len(),
                test.len()
            )));
        }
        Ok((train, test))
    }
}

/// Rotates a seeded permutation of subjects (and optionally profiles) so
/// that `n_folds` folds of `k_subjects` together hold out every subject.
pub fn make_folds(
    data: &Dataset,
    k_subjects: usize,
    k_profiles: usize,
    n_folds: usize,
    seed: u64,
) -> Result<Vec<FoldSpec>> {
    let mut subjects = data.subjects();
    let mut profiles = data.profiles();
    if subjects.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 subjects for cross-validation, found {}",
            subjects.len()
        )));
    }
    if k_subjects == 0 || k_subjects >= subjects.len() {
        return Err(Error::Config(format!(
            "k_subjects must be in [1, {}), got {k_subjects}",
            subjects.len()
        )));
    }
    if n_folds == 0 || n_folds * k_subjects < subjects.len() {
        return Err(Error::Config(format!(
            "{n_folds} folds of {k_subjects} cannot cover {} subjects",
            subjects.len()
        )));
    }
    if n_folds > subjects.len() {
        return Err(Error::Config(format!(
            "{n_folds} folds exceed the {} available subjects",
            subjects.len()
        )));
    }
    if k_profiles >= profiles.len().max(1) && k_profiles > 0 {
        return Err(Error::Config(format!(
            "k_profiles must be < {}, got {k_profiles}",
            profiles.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    profiles.shuffle(&mut rng);
    let folds = (0..n_folds)
        .map(|i| {
            let pick = |pool: &[_], k: usize| -> Vec<_> {
                let mut v: Vec<_> = (0..k).map(|j| pool[(i * k + j) % pool.len()]).collect();
                v.sort();
                v.dedup();
                v
            };
            let mut held_out_subjects: Vec<String> = (0..k_subjects)
                .map(|j| subjects[(i * k_subjects + j) % subjects.len()].clone())
                .collect();
            held_out_subjects.sort();
            held_out_subjects.dedup();
            FoldSpec {
                held_out_subjects,
                held_out_profiles: if k_profiles == 0 {
                    Vec::new()
                } else {
                    pick(&profiles, k_profiles)
                },
                fold_index: i,
                n_folds,
            }
        })
        .collect();
    Ok(folds)
}
