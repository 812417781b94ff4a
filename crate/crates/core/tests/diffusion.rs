use mam_core::diffusion::{ancestral_sample, forward_noise, make_schedule, Denoise, NoiseSchedule, ScheduleKind};
use mam_core::Result;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn moments(v: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let v: Vec<f64> = v.collect();
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var, n)
}

#[test]
fn forward_marginals_match_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 10_000;
    for case in 0..5 {
        let kind = if case % 2 == 0 {
            ScheduleKind::Cosine
        } else {
            ScheduleKind::Linear
        };
        let steps = rng.random_range(2..=100);
        let sched = make_schedule(kind, steps, rng.random_range(0.005..0.05)).unwrap();
        let t = rng.random_range(1..=steps);
        let x0_vals = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let x0 = Array3::from_shape_fn((draws, 1, 2), |(_, _, c)| x0_vals[c]);
        let s = forward_noise(&x0, &vec![t; draws], &sched, 100 + case).unwrap();
        let bb = sched.beta_bar(t);
        for (c, &x) in x0_vals.iter().enumerate() {
            let (mean, var, n) = moments(s.x_t.slice(ndarray::s![.., 0, c]).iter().copied());
            let want_var = 1.0 - bb;
            let se_mean = (want_var / n as f64).sqrt();
            let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
            assert!(
                (mean - bb.sqrt() * x).abs() < 3.0 * se_mean,
                "case {case} ch {c}: mean {mean}"
            );
            assert!(
                (var - want_var).abs() < 3.0 * se_var,
                "case {case} ch {c}: var {var} vs {want_var}"
            );
        }
    }
}

#[test]
fn closed_form_equals_composed_recursion() {
    let sched = make_schedule(ScheduleKind::Linear, 3, 0.2).unwrap();
    let trials = 100_000;
    let x0 = 4.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // iterate x_t = sqrt(beta_t) x_{t-1} + sqrt(1 - beta_t) eps_t three times
    let composed = (0..trials).map(|_| {
        let mut x = x0;
        for t in 1..=3 {
            let b = sched.beta(t);
            let e: f64 = StandardNormal.sample(&mut rng);
            x = b.sqrt() * x + (1.0 - b).sqrt() * e;
        }
        x
    });
    let (m_rec, v_rec, _) = moments(composed);
    let x0_arr = Array3::from_elem((trials, 1, 1), x0);
    let closed = forward_noise(&x0_arr, &vec![3; trials], &sched, 9).unwrap();
    let (m_cf, v_cf, _) = moments(closed.x_t.iter().copied());
    assert!((m_rec - m_cf).abs() / m_cf.abs() < 0.01, "{m_rec} vs {m_cf}");
    assert!((v_rec - v_cf).abs() / v_cf < 0.01, "{v_rec} vs {v_cf}");
}

/// Exact posterior mean `E[x0 | x_t]` for scalar data `x0 ~ N(mu, s2)`.
struct GaussianOracle {
    mu: f64,
    s2: f64,
    schedule: NoiseSchedule,
}

impl GaussianOracle {
    fn gain(&self, t: usize) -> f64 {
        let bb = self.schedule.beta_bar(t);
        self.s2 * bb.sqrt() / (bb * self.s2 + 1.0 - bb)
    }
}

impl Denoise for GaussianOracle {
    fn num_steps(&self) -> usize {
        self.schedule.num_steps
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn predict_x0(&self, x_t: &Array3<f64>, _cond: &Array3<f64>, t: &[usize]) -> Result<Array3<f64>> {
        let bb = self.schedule.beta_bar(t[0]);
        let k = self.gain(t[0]);
        Ok(x_t.mapv(|x| self.mu + k * (x - bb.sqrt() * self.mu)))
    }
}

#[test]
fn sampler_matches_linear_gaussian_analysis() {
    let schedule = make_schedule(ScheduleKind::Cosine, 20, 0.01).unwrap();
    let oracle = GaussianOracle {
        mu: 0.8,
        s2: 0.25,
        schedule: schedule.clone(),
    };
    // Propagate mean and variance of x_t through the sampler's linear updates.
    let (mut m, mut v) = (0.0, 1.0);
    for t in (2..=20).rev() {
        let bb = schedule.beta_bar(t);
        let bb_prev = schedule.beta_bar(t - 1);
        let b = schedule.beta(t);
        let a_coef = bb_prev.sqrt() * (1.0 - b) / (1.0 - bb);
        let b_coef = b.sqrt() * (1.0 - bb_prev) / (1.0 - bb);
        let var = (1.0 - bb_prev) * (1.0 - b) / (1.0 - bb);
        let k = oracle.gain(t);
        m = a_coef * (oracle.mu + k * (m - bb.sqrt() * oracle.mu)) + b_coef * m;
        v = (a_coef * k + b_coef).powi(2) * v + var;
    }
    let k1 = oracle.gain(1);
    let want_mean = oracle.mu + k1 * (m - schedule.beta_bar(1).sqrt() * oracle.mu);
    let want_var = k1 * k1 * v;

    let draws = 1000;
    let cond = Array3::zeros((draws, 1, 1));
    let out = ancestral_sample(&oracle, &cond, &schedule, 42).unwrap();
    let (mean, var, n) = moments(out.iter().copied());
    let se_mean = (want_var / n as f64).sqrt();
    let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
    assert!((mean - want_mean).abs() < 3.0 * se_mean, "{mean} vs {want_mean}");
    assert!((var - want_var).abs() < 3.0 * se_var, "{var} vs {want_var}");
    // The sampled mean also lands on the data mean.
    assert!((mean - oracle.mu).abs() < 3.0 * se_mean + 1e-3);
}
