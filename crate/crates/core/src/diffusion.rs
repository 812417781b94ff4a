//! Forward noising, noise schedules and ancestral sampling for models that
//! predict the clean signal.
//!
//! `beta[t]` is the per-step *signal retention*: one forward step maps
//! `x_{t-1}` to `sqrt(beta_t) x_{t-1} + sqrt(1 - beta_t) eps`. Composing the
//! steps gives the closed-form marginal
//! `x_t = sqrt(beta_bar_t) x_0 + sqrt(1 - beta_bar_t) eps` with
//! `beta_bar_t = prod_{s <= t} beta_s`. Steps are indexed `1..=num_steps`.

use ndarray::{Array3, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

const COSINE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `beta_bar` falls linearly from 1 (at t = 0) to `retention_min` at the last step.
    Linear,
    /// `beta_bar_t = max(cos^2(t / T * pi / 2), 1e-5)`.
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub num_steps: usize,
    pub retention_min: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Cosine,
            num_steps: 50,
            retention_min: 0.01,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.kind, self.num_steps, self.retention_min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub num_steps: usize,
    pub retention_min: f64,
    beta: Vec<f64>,
    beta_bar: Vec<f64>,
}

/// Coefficients of the Gaussian posterior `q(x_{t-1} | x_t, x_0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    /// Weight on the predicted clean signal.
    pub coef_x0: f64,
    /// Weight on the current noisy sample.
    pub coef_xt: f64,
    pub variance: f64,
}

pub fn make_schedule(kind: ScheduleKind, num_steps: usize, retention_min: f64) -> Result<NoiseSchedule> {
    if num_steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(retention_min > 0.0 && retention_min < 1.0) {
        return Err(Error::Config(format!(
            "retention_min must lie in (0, 1), got {retention_min}"
        )));
    }
    let n = num_steps as f64;
    let target: Vec<f64> = (1..=num_steps)
        .map(|t| {
            let frac = t as f64 / n;
            match kind {
                ScheduleKind::Linear => 1.0 - frac * (1.0 - retention_min),
                ScheduleKind::Cosine => {
                    let c = (frac * std::f64::consts::FRAC_PI_2).cos();
                    (c * c).max(COSINE_FLOOR)
                }
            }
        })
        .collect();

    // Derive per-step retention, then rebuild the cumulative product from it so
    // that beta_bar[t] == beta_bar[t-1] * beta[t] holds exactly.
    let mut beta = Vec::with_capacity(num_steps);
    let mut prev = 1.0;
    for &tb in &target {
        beta.push((tb / prev).min(1.0));
        prev = tb;
    }
    let mut beta_bar = Vec::with_capacity(num_steps);
    let mut acc = 1.0;
    for &b in &beta {
        acc *= b;
        beta_bar.push(acc);
    }
    Ok(NoiseSchedule {
        kind,
        num_steps,
        retention_min,
        beta,
        beta_bar,
    })
}

impl NoiseSchedule {
    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn beta_bars(&self) -> &[f64] {
        &self.beta_bar
    }

    /// Per-step retention at step `t` (1-based).
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// Cumulative retention at step `t` (1-based); `beta_bar(0) == 1`.
    pub fn beta_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.beta_bar[t - 1]
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps {
            return Err(Error::Config(format!(
                "diffusion step {t} outside [1, {}]",
                self.num_steps
            )));
        }
        Ok(())
    }

    pub fn posterior(&self, t: usize) -> Posterior {
        let bb = self.beta_bar(t);
        let bb_prev = self.beta_bar(t - 1);
        let b = self.beta(t);
        let denom = 1.0 - bb;
        if denom <= f64::EPSILON {
            return Posterior {
                coef_x0: bb_prev.sqrt(),
                coef_xt: 0.0,
                variance: 0.0,
            };
        }
        Posterior {
            coef_x0: bb_prev.sqrt() * (1.0 - b) / denom,
            coef_xt: b.sqrt() * (1.0 - bb_prev) / denom,
            variance: ((1.0 - bb_prev) * (1.0 - b) / denom).max(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub x_t: Array3<f64>,
    pub t: Vec<usize>,
    pub epsilon: Array3<f64>,
}

pub(crate) fn standard_normal(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Closed-form forward marginal at per-sample steps `t`.
pub fn forward_noise(x0: &Array3<f64>, t: &[usize], schedule: &NoiseSchedule, rng_seed: u64) -> Result<NoisySample> {
    let (b, l, d) = x0.dim();
    if t.len() != b {
        return Err(shape_err(format!("{} step indices for batch of {b}", t.len())));
    }
    for &ti in t {
        schedule.check_step(ti)?;
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("forward_noise input is not finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let epsilon = standard_normal((b, l, d), &mut rng);
    let mut x_t = Array3::zeros((b, l, d));
    for (i, &ti) in t.iter().enumerate() {
        let bb = schedule.beta_bar(ti);
        let (s, n) = (bb.sqrt(), (1.0 - bb).sqrt());
        Zip::from(x_t.index_axis_mut(ndarray::Axis(0), i))
            .and(x0.index_axis(ndarray::Axis(0), i))
            .and(epsilon.index_axis(ndarray::Axis(0), i))
            .for_each(|o, &x, &e| *o = s * x + n * e);
    }
    Ok(NoisySample {
        x_t,
        t: t.to_vec(),
        epsilon,
    })
}

/// A conditional model that predicts the clean signal from a noisy one.
pub trait Denoise {
    /// Number of diffusion steps the model was built for.
    fn num_steps(&self) -> usize;
    /// Channel count of the generated signal.
    fn output_dim(&self) -> usize;
    fn predict_x0(&self, x_t: &Array3<f64>, cond: &Array3<f64>, t: &[usize]) -> Result<Array3<f64>>;
}

/// Ancestral sampling from pure noise, returning the final clean prediction.
///
/// Exactly `num_steps` model evaluations are made; the last step returns the
/// prediction without adding noise.
pub fn ancestral_sample<D: Denoise + ?Sized>(
    denoiser: &D,
    condition: &Array3<f64>,
    schedule: &NoiseSchedule,
    rng_seed: u64,
) -> Result<Array3<f64>> {
    if denoiser.num_steps() != schedule.num_steps {
        return Err(Error::Config(format!(
            "denoiser expects {} steps but schedule has {}",
            denoiser.num_steps(),
            schedule.num_steps
        )));
    }
    let (b, l, _) = condition.dim();
    let d = denoiser.output_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut x_t = standard_normal((b, l, d), &mut rng);
    for t in (1..=schedule.num_steps).rev() {
        let x0_hat = denoiser.predict_x0(&x_t, condition, &vec![t; b])?;
        if x0_hat.dim() != (b, l, d) {
            return Err(shape_err(format!(
                "denoiser returned {:?}, expected {:?}",
                x0_hat.dim(),
                (b, l, d)
            )));
        }
        if t == 1 {
            return Ok(x0_hat);
        }
        let post = schedule.posterior(t);
        let sd = post.variance.sqrt();
        let z = standard_normal((b, l, d), &mut rng);
        Zip::from(&mut x_t)
            .and(&x0_hat)
            .and(&z)
            .for_each(|x, &p, &z| *x = post.coef_x0 * p + post.coef_xt * *x + sd * z);
    }
    unreachable!("schedule has at least one step")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn single_step_linear_schedule_is_its_own_product() {
        let s = make_schedule(ScheduleKind::Linear, 1, 0.01).unwrap();
        assert!((s.betas()[0] - 0.01).abs() < 1e-15);
        assert!((s.beta_bars()[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn two_step_cosine_schedule() {
        let s = make_schedule(ScheduleKind::Cosine, 2, 0.01).unwrap();
        assert!((s.beta_bars()[0] - 0.5).abs() < 1e-12);
        assert!((s.beta_bars()[1] - 1e-5).abs() < 1e-12);
    }

    #[test]
    fn linear_fifty_step_recursion_matches_cumulative_product() {
        let s = make_schedule(ScheduleKind::Linear, 50, 0.01).unwrap();
        let bb = s.beta_bars();
        let mut prod = 1.0;
        for t in 0..50 {
            prod *= s.betas()[t];
            assert_eq!(bb[t], prod);
            assert!(s.betas()[t] > 0.0 && s.betas()[t] < 1.0);
            if t > 0 {
                assert!(bb[t] < bb[t - 1]);
                assert!((s.betas()[t] - bb[t] / bb[t - 1]).abs() < 1e-12);
            }
        }
        assert!((bb[49] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn builtin_schedules_end_noise_dominated() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for n in [1, 2, 10, 50, 200] {
                let s = make_schedule(kind, n, 0.01).unwrap();
                assert!(*s.beta_bars().last().unwrap() < 0.05, "{kind:?} {n}");
                assert!(s.betas().iter().all(|&b| b > 0.0 && b <= 1.0));
            }
        }
    }

    #[test]
    fn schedule_rejects_bad_arguments() {
        assert!(make_schedule(ScheduleKind::Cosine, 0, 0.01).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 5, 0.0).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 5, 1.0).is_err());
    }

    #[test]
    fn forward_noise_identity_when_nothing_decays() {
        // A hand-built schedule with beta_bar = 1 exercises the zero-noise endpoint.
        let s = NoiseSchedule {
            kind: ScheduleKind::Linear,
            num_steps: 1,
            retention_min: 0.5,
            beta: vec![1.0],
            beta_bar: vec![1.0],
        };
        let x0 = Array3::from_shape_fn((2, 3, 2), |(a, b, c)| (a + 2 * b + 3 * c) as f64);
        let ns = forward_noise(&x0, &[1, 1], &s, 9).unwrap();
        assert_eq!(ns.x_t, x0);
    }

    #[test]
    fn forward_noise_is_deterministic_and_validated() {
        let s = make_schedule(ScheduleKind::Cosine, 10, 0.01).unwrap();
        let x0 = Array3::<f64>::ones((2, 4, 3));
        let a = forward_noise(&x0, &[3, 7], &s, 42).unwrap();
        let b = forward_noise(&x0, &[3, 7], &s, 42).unwrap();
        assert_eq!(a, b);
        assert!(forward_noise(&x0, &[0, 7], &s, 1).is_err());
        assert!(forward_noise(&x0, &[3, 11], &s, 1).is_err());
        assert!(forward_noise(&x0, &[3], &s, 1).is_err());
        let mut bad = x0.clone();
        bad[[0, 0, 0]] = f64::NAN;
        assert!(matches!(forward_noise(&bad, &[1, 1], &s, 1), Err(Error::Numerical(_))));
    }

    #[test]
    fn pure_noise_endpoint_is_standard_normal() {
        let s = NoiseSchedule {
            kind: ScheduleKind::Linear,
            num_steps: 1,
            retention_min: 0.5,
            beta: vec![0.0],
            beta_bar: vec![0.0],
        };
        let x0 = Array3::from_elem((1, 10_000, 1), 5.0);
        let ns = forward_noise(&x0, &[1], &s, 3).unwrap();
        let n = ns.x_t.len() as f64;
        let mean = ns.x_t.sum() / n;
        let var = ns.x_t.mapv(|v| (v - mean).powi(2)).sum() / (n - 1.0);
        assert!(mean.abs() < 3.0 / n.sqrt());
        assert!((var - 1.0).abs() < 3.0 * (2.0 / (n - 1.0)).sqrt());
        assert_eq!(ns.x_t, ns.epsilon);
    }

    #[test]
    fn posterior_mean_recovers_clean_signal_without_noise() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = make_schedule(kind, 50, 0.01).unwrap();
            let x0 = 0.73;
            let mut x = s.beta_bar(50).sqrt() * x0;
            for t in (2..=50).rev() {
                let p = s.posterior(t);
                x = p.coef_x0 * x0 + p.coef_xt * x;
                assert!((x - s.beta_bar(t - 1).sqrt() * x0).abs() < 1e-12);
            }
            assert!((x - s.beta_bar(1).sqrt() * x0).abs() < 1e-12);
        }
    }

    struct Fixed {
        value: Array3<f64>,
        calls: Cell<usize>,
        steps: usize,
    }

    impl Denoise for Fixed {
        fn num_steps(&self) -> usize {
            self.steps
        }
        fn output_dim(&self) -> usize {
            self.value.dim().2
        }
        fn predict_x0(&self, _x: &Array3<f64>, _c: &Array3<f64>, _t: &[usize]) -> Result<Array3<f64>> {
            self.calls.set(self.calls.get() + 1);
            Ok(self.value.clone())
        }
    }

    #[test]
    fn fixed_prediction_is_returned_verbatim_after_exactly_t_calls() {
        let c = Array3::from_shape_fn((2, 5, 3), |(a, b, c)| (a * 7 + b * 3 + c) as f64 * 0.1);
        for steps in [1, 4, 50] {
            let s = make_schedule(ScheduleKind::Cosine, steps, 0.01).unwrap();
            let d = Fixed {
                value: c.clone(),
                calls: Cell::new(0),
                steps,
            };
            for seed in [0, 1, 99] {
                d.calls.set(0);
                let out = ancestral_sample(&d, &Array3::zeros((2, 5, 1)), &s, seed).unwrap();
                assert_eq!(out, c);
                assert_eq!(d.calls.get(), steps);
            }
        }
    }

    #[test]
    fn step_count_mismatch_is_rejected() {
        let s = make_schedule(ScheduleKind::Cosine, 10, 0.01).unwrap();
        let d = Fixed {
            value: Array3::zeros((1, 2, 1)),
            calls: Cell::new(0),
            steps: 5,
        };
        assert!(ancestral_sample(&d, &Array3::zeros((1, 2, 1)), &s, 0).is_err());
    }
}
