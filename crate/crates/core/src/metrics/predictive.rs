//! Train-on-generated, test-on-real forecasting score.

use mam_tape::{AdamW, Bound, Graph, ParamSet, Tensor, Var};
use ndarray::{s, Array3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Fraction of each sequence to forecast from the rest.
    pub horizon_frac: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            hidden: 32,
            epochs: 200,
            lr: 1e-2,
            horizon_frac: 0.25,
            seed: 0,
        }
    }
}

struct Gru {
    hidden: usize,
    d: usize,
    horizon: usize,
}

impl Gru {
    fn init(&self, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = self.hidden;
        let bound = 1.0 / (h as f64).sqrt();
        let mut uniform =
            |shape: &[usize]| Tensor::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-bound..bound));
        let mut p = ParamSet::new();
        p.insert("wi", uniform(&[self.d, 3 * h]));
        p.insert("wh", uniform(&[h, 3 * h]));
        p.insert("bi", uniform(&[3 * h]));
        p.insert("bh", uniform(&[3 * h]));
        p.insert("head.w", uniform(&[h, self.horizon * self.d]));
        p.insert("head.b", uniform(&[self.horizon * self.d]));
        p
    }

    /// `[N, prefix, d] -> [N, horizon, d]`.
    fn forward<'g>(&self, p: &Bound<'g>, prefix: Var<'g>) -> Var<'g> {
        let (n, steps, d) = (prefix.shape()[0], prefix.shape()[1], self.d);
        let h_dim = self.hidden;
        let g = prefix.graph();
        let mut h = g.constant(Tensor::zeros(IxDyn(&[n, h_dim])));
        let (wi, wh, bi, bh) = (p.get("wi"), p.get("wh"), p.get("bi"), p.get("bh"));
        for l in 0..steps {
            let x = prefix.slice(1, l, 1).reshape(&[n, d]);
            let gi = x.matmul(wi) + bi;
            let gh = h.matmul(wh) + bh;
            let r = (gi.slice(1, 0, h_dim) + gh.slice(1, 0, h_dim)).sigmoid();
            let z = (gi.slice(1, h_dim, h_dim) + gh.slice(1, h_dim, h_dim)).sigmoid();
            let cand = (gi.slice(1, 2 * h_dim, h_dim) + r * gh.slice(1, 2 * h_dim, h_dim)).tanh();
            h = cand + z * (h - cand);
        }
        (h.matmul(p.get("head.w")) + p.get("head.b")).reshape(&[n, self.horizon, d])
    }
}

fn split(seqs: &Array3<f64>, horizon: usize) -> (Tensor, Tensor) {
    let l = seqs.dim().1;
    (
        seqs.slice(s![.., ..l - horizon, ..]).to_owned().into_dyn(),
        seqs.slice(s![.., l - horizon.., ..]).to_owned().into_dyn(),
    )
}

/// Fits a one-layer GRU forecaster on `train` (full batch, fixed seed) and
/// returns its mean absolute error on `test`.
pub fn predictive_score(train: &Array3<f64>, test: &Array3<f64>, cfg: &PredictorConfig) -> Result<f64> {
    let (n, l, d) = train.dim();
    if test.dim().1 != l || test.dim().2 != d {
        return Err(shape_err(format!(
            "train {:?} and test {:?} differ in length or channels",
            train.dim(),
            test.dim()
        )));
    }
    if !(cfg.horizon_frac > 0.0 && cfg.horizon_frac < 1.0) {
        return Err(Error::Config(format!(
            "horizon_frac must be in (0, 1), got {}",
            cfg.horizon_frac
        )));
    }
    let horizon = ((l as f64) * cfg.horizon_frac).round() as usize;
    if n == 0 || test.dim().0 == 0 || horizon == 0 || horizon >= l {
        return Err(shape_err(format!(
            "sequences of length {l} are too short for horizon fraction {}",
            cfg.horizon_frac
        )));
    }
    let model = Gru {
        hidden: cfg.hidden,
        d,
        horizon,
    };
    let mut params = model.init(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, 0.0);
    let (x_train, y_train) = split(train, horizon);
    for _ in 0..cfg.epochs {
        let g = Graph::new();
        let p = params.bind(&g);
        let pred = model.forward(&p, g.constant(x_train.clone()));
        let loss = (pred - g.constant(y_train.clone())).square().mean();
        let grads = p.grads(&g.backward(loss));
        if !grads.all_finite() {
            return Err(Error::Numerical("forecaster gradient diverged".into()));
        }
        opt.step(&mut params, &grads);
    }
    let (x_test, y_test) = split(test, horizon);
    let g = Graph::inference();
    let p = params.bind(&g);
    let pred = model.forward(&p, g.constant(x_test)).to_tensor();
    Ok((pred - y_test).mapv(f64::abs).mean().unwrap_or(f64::NAN))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sines(n: usize, l: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Array3::zeros((n, l, 2));
        for i in 0..n {
            let phase = rng.random_range(0.0..6.28);
            let freq = rng.random_range(0.2..0.4);
            for t in 0..l {
                out[[i, t, 0]] = 0.5 + 0.4 * (freq * t as f64 + phase).sin();
                out[[i, t, 1]] = 0.5 + 0.4 * (freq * t as f64 + phase).cos();
            }
        }
        out
    }

    fn quick() -> PredictorConfig {
        PredictorConfig {
            epochs: 60,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let train = sines(16, 20, 0);
        let test = sines(8, 20, 1);
        let a = predictive_score(&train, &test, &quick()).unwrap();
        let b = predictive_score(&train, &test, &quick()).unwrap();
        assert!((a - b).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_shapes() {
        let train = sines(4, 20, 0);
        assert!(predictive_score(&train, &sines(4, 21, 0), &quick()).is_err());
        let bad = PredictorConfig {
            horizon_frac: 1.0,
            ..quick()
        };
        assert!(predictive_score(&train, &train, &bad).is_err());
        assert!(predictive_score(
            &sines(4, 2, 0),
            &sines(4, 2, 0),
            &PredictorConfig {
                horizon_frac: 0.1,
                ..quick()
            }
        )
        .is_err());
    }
}
