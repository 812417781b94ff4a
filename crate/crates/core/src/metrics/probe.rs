//! Linear and one-hidden-layer probes on frozen representations.

use mam_tape::{AdamW, Bound, Graph, ParamSet, Tensor, Var};
use ndarray::{Array2, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

const TEST_FRACTION: f64 = 0.2;
const HIDDEN: usize = 64;
const L2: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Linear,
    Nonlinear,
}

/// Per-class shuffled split with `round(0.2 * count)` test items per class.
pub fn stratified_split(labels: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in 0..k {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * TEST_FRACTION).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn standardize(train: &Array2<f64>, other: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mean = train.mean_axis(Axis(0)).unwrap();
    let std = train.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    ((train - &mean) / &std, (other - &mean) / &std)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let b = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-b..b))
}

fn logits<'g>(kind: ProbeKind, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
    match kind {
        ProbeKind::Linear => x.matmul(p.get("w")) + p.get("b"),
        ProbeKind::Nonlinear => {
            let h = (x.matmul(p.get("w1")) + p.get("b1")).relu();
            h.matmul(p.get("w2")) + p.get("b2")
        }
    }
}

/// Trains a probe on 80% of the samples (stratified) and returns accuracy
/// on the remaining 20%.
pub fn probe(latents: &Array2<f64>, labels: &[usize], kind: ProbeKind, seed: u64) -> Result<f64> {
    if latents.nrows() != labels.len() {
        return Err(shape_err(format!(
            "{} latents for {} labels",
            latents.nrows(),
            labels.len()
        )));
    }
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Data("probing needs at least two classes".into()));
    }
    let k = classes[classes.len() - 1] + 1;
    let (train_idx, test_idx) = stratified_split(labels, seed);
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Data("too few samples for an 80/20 split".into()));
    }
    let pick = |idx: &[usize]| latents.select(Axis(0), idx);
    let (x_train, x_test) = standardize(&pick(&train_idx), &pick(&test_idx));
    let d = latents.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut params = ParamSet::new();
    let (iters, lr) = match kind {
        ProbeKind::Linear => {
            params.insert("w", uniform(&mut rng, &[d, k], d));
            params.insert("b", Tensor::zeros(IxDyn(&[k])));
            (300, 0.05)
        }
        ProbeKind::Nonlinear => {
            params.insert("w1", uniform(&mut rng, &[d, HIDDEN], d));
            params.insert("b1", Tensor::zeros(IxDyn(&[HIDDEN])));
            params.insert("w2", uniform(&mut rng, &[HIDDEN, k], HIDDEN));
            params.insert("b2", Tensor::zeros(IxDyn(&[k])));
            (500, 0.01)
        }
    };
    let onehot = Tensor::from_shape_fn(IxDyn(&[train_idx.len(), k]), |ix| {
        f64::from(labels[train_idx[ix[0]]] == ix[1])
    });
    let x_train = x_train.into_dyn();
    let mut opt = AdamW::new(lr, 0.0);
    let n = train_idx.len() as f64;
    for _ in 0..iters {
        let g = Graph::new();
        let p = params.bind(&g);
        let ce = -(logits(kind, &p, g.constant(x_train.clone())).log_softmax() * g.constant(onehot.clone()))
            .sum()
            .scale(1.0 / n);
        let mut loss = ce;
        for w in ["w", "w1", "w2"] {
            if let Some(v) = p.try_get(w) {
                loss = loss + v.square().sum().scale(L2);
            }
        }
        let grads = p.grads(&g.backward(loss));
        opt.step(&mut params, &grads);
    }
    let g = Graph::inference();
    let p = params.bind(&g);
    let scores = logits(kind, &p, g.constant(x_test.into_dyn())).to_tensor();
    let correct = scores
        .outer_iter()
        .zip(&test_idx)
        .filter(|(row, &i)| {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(c, _)| c)
                .unwrap();
            best == labels[i]
        })
        .count();
    Ok(correct as f64 / test_idx.len() as f64)
}
