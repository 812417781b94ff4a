//! Two observation streams of one hidden dynamical system.
//!
//! The hidden state follows either a pair of coupled linear oscillators
//! (advanced by exact rotation in their normal-mode coordinates) or the
//! Lorenz system (RK4). Each modality is a fixed smooth function of the same
//! hidden state plus Gaussian noise; the regime index is the sequence label.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, SequencePair};
use crate::error::{Error, Result};

const DIVERGENCE_NORM: f64 = 1e6;
const MAX_RETRIES: usize = 10;
const LORENZ_SCALE: f64 = 1.0 / 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    CoupledOscillators,
    Lorenz,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ObsMap {
    /// `tanh(W z + b)` with full-rank random `W`.
    TanhAffine,
    /// Channel `k` reads hidden coordinate `k mod d_Z`.
    Identity,
    /// `tanh(W z + b)` with `W` of the given rank.
    Lossy { rank: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSystem {
    pub dynamics: Dynamics,
    /// Oscillators: two normal-mode angular frequencies in radians per
    /// sample, optionally followed by the two modes' amplitude scales
    /// (default 1). Lorenz: `[sigma, rho, beta]`.
    pub regimes: Vec<Vec<f64>>,
    /// Mixing angle between the two oscillator modes.
    pub coupling: f64,
    pub d_x: usize,
    pub d_y: usize,
    pub obs_x: ObsMap,
    pub obs_y: ObsMap,
    /// Gain applied to the hidden state before the nonlinearity.
    pub obs_gain: f64,
    pub obs_noise_std: f64,
    pub process_noise_std: f64,
    pub n_subjects: usize,
    /// Relative per-subject perturbation of the regime parameters.
    pub subject_jitter: f64,
    /// Lorenz integration step, and integration steps per emitted sample.
    pub dt: f64,
    pub stride: usize,
    pub burn_in: usize,
}

impl Default for SyntheticSystem {
    fn default() -> Self {
        SyntheticSystem {
            dynamics: Dynamics::CoupledOscillators,
            regimes: vec![
                vec![0.10, 0.45, 1.0, 0.5],
                vec![0.25, 0.15, 0.5, 1.0],
                vec![0.40, 0.30, 0.75, 0.75],
            ],
            coupling: 0.6,
            d_x: 6,
            d_y: 4,
            obs_x: ObsMap::TanhAffine,
            obs_y: ObsMap::TanhAffine,
            obs_gain: 1.0,
            obs_noise_std: 0.01,
            process_noise_std: 0.0,
            n_subjects: 4,
            subject_jitter: 0.05,
            dt: 0.01,
            stride: 3,
            burn_in: 500,
        }
    }
}

impl SyntheticSystem {
    /// Named presets: `coupled`, `coupled_clean`, `coupled_lossy`,
    /// `coupled_identity`, `lorenz`.
    pub fn preset(name: &str) -> Result<Self> {
        let base = SyntheticSystem::default();
        let sys = match name {
            "coupled" => base,
            "coupled_clean" => SyntheticSystem {
                obs_noise_std: 0.0,
                ..base
            },
            "coupled_lossy" => SyntheticSystem {
                obs_y: ObsMap::Lossy { rank: 2 },
                ..base
            },
            "coupled_identity" => SyntheticSystem {
                obs_x: ObsMap::Identity,
                obs_y: ObsMap::Identity,
                d_x: 4,
                d_y: 4,
                obs_noise_std: 0.0,
                ..base
            },
            "lorenz" => SyntheticSystem {
                dynamics: Dynamics::Lorenz,
                regimes: vec![
                    vec![10.0, 28.0, 8.0 / 3.0],
                    vec![10.0, 35.0, 8.0 / 3.0],
                    vec![10.0, 45.0, 8.0 / 3.0],
                ],
                obs_gain: 2.0,
                ..base
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown synthetic system '{other}' (expected coupled, coupled_clean, coupled_lossy, coupled_identity or lorenz)"
                )))
            }
        };
        Ok(sys)
    }

    pub fn hidden_dim(&self) -> usize {
        match self.dynamics {
            Dynamics::CoupledOscillators => 4,
            Dynamics::Lorenz => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.regimes.is_empty() {
            return bad("at least one regime is required".into());
        }
        let arity: &[usize] = match self.dynamics {
            Dynamics::CoupledOscillators => &[2, 4],
            Dynamics::Lorenz => &[3],
        };
        if let Some(r) = self.regimes.iter().find(|r| !arity.contains(&r.len())) {
            return bad(format!("regime {r:?} needs {arity:?} parameters"));
        }
        if self.d_x == 0 || self.d_y == 0 {
            return bad("observation dimensions must be >= 1".into());
        }
        if self.n_subjects == 0 {
            return bad("n_subjects must be >= 1".into());
        }
        for (name, v) in [
            ("obs_noise_std", self.obs_noise_std),
            ("process_noise_std", self.process_noise_std),
            ("subject_jitter", self.subject_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        if self.dynamics == Dynamics::Lorenz && !(self.dt > 0.0 && self.stride >= 1) {
            return bad("lorenz needs dt > 0 and stride >= 1".into());
        }
        for m in [self.obs_x, self.obs_y] {
            if let ObsMap::Lossy { rank } = m {
                if rank == 0 || rank >= self.hidden_dim() {
                    return bad(format!("lossy rank must be in [1, {}), got {rank}", self.hidden_dim()));
                }
            }
        }
        Ok(())
    }
}

/// Fixed observation map `obs = f(z)`.
#[derive(Debug, Clone)]
struct Observer {
    kind: ObsMap,
    w: Array2<f64>,
    b: Array1<f64>,
}

impl Observer {
    fn new(kind: ObsMap, d_obs: usize, d_z: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut normal = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| StandardNormal.sample(&mut *rng));
        let scale = gain / (d_z as f64).sqrt();
        let w = match kind {
            ObsMap::Identity => Array2::from_shape_fn((d_obs, d_z), |(i, j)| if i % d_z == j { 1.0 } else { 0.0 }),
            ObsMap::TanhAffine => normal(d_obs, d_z) * scale,
            ObsMap::Lossy { rank } => {
                let a = normal(d_obs, rank);
                let b = normal(rank, d_z);
                a.dot(&b) * (scale / (rank as f64).sqrt())
            }
        };
        let b = match kind {
            ObsMap::Identity => Array1::zeros(d_obs),
            _ => Array1::from_shape_fn(d_obs, |_| {
                let v: f64 = StandardNormal.sample(&mut *rng);
                0.1 * v
            }),
        };
        Observer { kind, w, b }
    }

    fn observe(&self, hidden: &Array2<f64>) -> Array2<f64> {
        let lin = hidden.dot(&self.w.t()) + &self.b;
        match self.kind {
            ObsMap::Identity => lin,
            _ => lin.mapv(f64::tanh),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticOutput {
    pub dataset: Dataset,
    /// Hidden trajectories `[n, L, d_Z]`, for tests only.
    pub hidden: Array3<f64>,
}

fn rotation(theta: f64) -> [[f64; 2]; 2] {
    let (s, c) = theta.sin_cos();
    [[c, -s], [s, c]]
}

fn oscillator_path(freqs: &[f64], coupling: f64, len: usize, process_noise: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut modes = [[0.0; 2]; 2];
    for (i, m) in modes.iter_mut().enumerate() {
        let amp = freqs.get(2 + i).copied().unwrap_or(1.0) * rng.random_range(0.5..1.5);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        *m = [amp * phase.cos(), amp * phase.sin()];
    }
    let rots = [rotation(freqs[0]), rotation(freqs[1])];
    let (s, c) = coupling.sin_cos();
    let mut out = Array2::zeros((len, 4));
    for l in 0..len {
        // mix mode coordinates pairwise into the physical coordinates
        for k in 0..2 {
            out[[l, k]] = c * modes[0][k] - s * modes[1][k];
            out[[l, k + 2]] = s * modes[0][k] + c * modes[1][k];
        }
        for (m, r) in modes.iter_mut().zip(&rots) {
            let next = [r[0][0] * m[0] + r[0][1] * m[1], r[1][0] * m[0] + r[1][1] * m[1]];
            *m = next;
            if process_noise > 0.0 {
                for v in m.iter_mut() {
                    *v += process_noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
    }
    out
}

fn lorenz_deriv(p: &[f64], z: [f64; 3]) -> [f64; 3] {
    let (sigma, rho, beta) = (p[0], p[1], p[2]);
    [
        sigma * (z[1] - z[0]),
        z[0] * (rho - z[2]) - z[1],
        z[0] * z[1] - beta * z[2],
    ]
}

pub(crate) fn rk4_step(p: &[f64], z: [f64; 3], dt: f64) -> [f64; 3] {
    let add = |a: [f64; 3], b: [f64; 3], h: f64| [a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2]];
    let k1 = lorenz_deriv(p, z);
    let k2 = lorenz_deriv(p, add(z, k1, dt / 2.0));
    let k3 = lorenz_deriv(p, add(z, k2, dt / 2.0));
    let k4 = lorenz_deriv(p, add(z, k3, dt));
    let mut out = z;
    for i in 0..3 {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

fn lorenz_path(sys: &SyntheticSystem, p: &[f64], len: usize, rng: &mut ChaCha8Rng) -> Option<Array2<f64>> {
    let mut z = [
        rng.random_range(-10.0..10.0),
        rng.random_range(-10.0..10.0),
        rng.random_range(5.0..35.0),
    ];
    let norm = |z: &[f64; 3]| (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt();
    for _ in 0..sys.burn_in {
        z = rk4_step(p, z, sys.dt);
        if !(norm(&z) < DIVERGENCE_NORM) {
            return None;
        }
    }
    let mut out = Array2::zeros((len, 3));
    for l in 0..len {
        for k in 0..3 {
            out[[l, k]] = z[k] * LORENZ_SCALE;
        }
        for _ in 0..sys.stride {
            z = rk4_step(p, z, sys.dt);
            if sys.process_noise_std > 0.0 {
                for v in z.iter_mut() {
                    *v += sys.process_noise_std * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        if !(norm(&z) < DIVERGENCE_NORM) {
            return None;
        }
    }
    Some(out)
}

/// Generates `n_sequences` pairs of length `len`. Sequence `i` belongs to
/// subject `i mod n_subjects` and regime `(i / n_subjects) mod n_regimes`.
/// Observations are in raw units.
pub fn generate_synthetic(sys: &SyntheticSystem, n_sequences: usize, len: usize, seed: u64) -> Result<SyntheticOutput> {
    sys.validate()?;
    if len == 0 {
        return Err(Error::Config("sequence length must be >= 1".into()));
    }
    let d_z = sys.hidden_dim();
    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(s);
        r
    };
    let mut map_rng = stream(1);
    let obs_x = Observer::new(sys.obs_x, sys.d_x, d_z, sys.obs_gain, &mut map_rng);
    let obs_y = Observer::new(sys.obs_y, sys.d_y, d_z, sys.obs_gain, &mut map_rng);
    let mut subject_rng = stream(2);
    let jitter: Vec<Vec<f64>> = (0..sys.n_subjects)
        .map(|_| {
            (0..sys.regimes[0].len())
                .map(|_| 1.0 + sys.subject_jitter * subject_rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let mut path_rng = stream(3);
    let mut noise_rng = stream(4);

    let mut pairs = Vec::with_capacity(n_sequences);
    let mut hidden = Array3::zeros((n_sequences, len, d_z));
    for i in 0..n_sequences {
        let subject = i % sys.n_subjects;
        let regime = (i / sys.n_subjects) % sys.regimes.len();
        let params: Vec<f64> = sys.regimes[regime]
            .iter()
            .zip(&jitter[subject])
            .map(|(p, j)| p * j)
            .collect();
        let path = match sys.dynamics {
            Dynamics::CoupledOscillators => Some(oscillator_path(
                &params,
                sys.coupling,
                len,
                sys.process_noise_std,
                &mut path_rng,
            )),
            Dynamics::Lorenz => {
                let mut found = None;
                for attempt in 0..MAX_RETRIES {
                    if let Some(p) = lorenz_path(sys, &params, len, &mut path_rng) {
                        found = Some(p);
                        break;
                    }
                    log::warn!("sequence {i}: trajectory diverged (attempt {attempt}), resampling");
                }
                found
            }
        };
        let path = path.ok_or_else(|| {
            Error::Numerical(format!(
                "sequence {i} diverged {MAX_RETRIES} times; check regime parameters"
            ))
        })?;
        let mut noisy = |a: Array2<f64>| {
            if sys.obs_noise_std > 0.0 {
                a.mapv(|v| v + sys.obs_noise_std * noise_rng.sample::<f64, _>(StandardNormal))
            } else {
                a
            }
        };
        let x = noisy(obs_x.observe(&path));
        let y = noisy(obs_y.observe(&path));
        hidden.index_axis_mut(Axis(0), i).assign(&path);
        pairs.push(SequencePair {
            x,
            y,
            subject_id: format!("s{subject:02}"),
            profile: regime,
        });
    }
    Ok(SyntheticOutput {
        dataset: Dataset { pairs },
        hidden,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_labels_and_determinism() {
        let sys = SyntheticSystem::default();
        let a = generate_synthetic(&sys, 24, 64, 7).unwrap();
        let b = generate_synthetic(&sys, 24, 64, 7).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.dataset.dims(), (64, 6, 4));
        assert_eq!(a.hidden.dim(), (24, 64, 4));
        assert_eq!(a.dataset.profiles(), vec![0, 1, 2]);
        assert_eq!(a.dataset.subjects().len(), 4);
        let c = generate_synthetic(&sys, 24, 64, 8).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn oscillator_rotation_preserves_mode_energy() {
        let sys = SyntheticSystem {
            obs_noise_std: 0.0,
            ..Default::default()
        };
        let out = generate_synthetic(&sys, 3, 200, 1).unwrap();
        for z in out.hidden.outer_iter() {
            let e0: f64 = z.row(0).iter().map(|v| v * v).sum();
            for row in z.outer_iter() {
                let e: f64 = row.iter().map(|v| v * v).sum();
                assert!((e - e0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_frequency_is_constant() {
        let sys = SyntheticSystem {
            regimes: vec![vec![0.0, 0.0]],
            obs_noise_std: 0.0,
            ..Default::default()
        };
        let out = generate_synthetic(&sys, 2, 30, 3).unwrap();
        for p in &out.dataset.pairs {
            for row in p.x.outer_iter() {
                assert_eq!(row, p.x.row(0));
            }
        }
    }

    #[test]
    fn lorenz_stays_on_attractor() {
        let sys = SyntheticSystem::preset("lorenz").unwrap();
        let out = generate_synthetic(&sys, 3, 64, 2).unwrap();
        assert!(out.hidden.iter().all(|v| v.is_finite() && v.abs() < 5.0));
        assert!(out.dataset.pairs.iter().all(|p| p.x.iter().all(|v| v.abs() <= 1.1)));
    }

    #[test]
    fn rk4_matches_linear_exact_solution() {
        // rho = 0, beta = 1 and x = y = 0 reduce the system to z' = -z
        let p = [10.0, 0.0, 1.0];
        let mut z = [0.0, 0.0, 1.0];
        for _ in 0..100 {
            z = rk4_step(&p, z, 0.01);
        }
        assert!((z[2] - (-1.0f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn lossy_map_has_reduced_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = Observer::new(ObsMap::Lossy { rank: 2 }, 6, 4, 1.0, &mut rng);
        let svd = nalgebra::DMatrix::from_row_slice(6, 4, obs.w.as_slice().unwrap()).svd(false, false);
        let nonzero = svd.singular_values.iter().filter(|&&s| s > 1e-10).count();
        assert_eq!(nonzero, 2);
    }

    #[test]
    fn invalid_configs() {
        assert!(SyntheticSystem::preset("pendulum").is_err());
        let bad = SyntheticSystem {
            regimes: vec![vec![0.1]],
            ..Default::default()
        };
        assert!(generate_synthetic(&bad, 1, 8, 0).is_err());
        let lossy = SyntheticSystem {
            obs_x: ObsMap::Lossy { rank: 4 },
            ..Default::default()
        };
        assert!(lossy.validate().is_err());
    }
}
