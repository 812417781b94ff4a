use mam_tape::{Bound, Graph, ParamSet, Tensor, Var};
use ndarray::{Array2, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `x @ W + b` with parameters `{name}.w` and `{name}.b`.
pub(crate) fn linear<'g>(p: &Bound<'g>, name: &str, x: Var<'g>) -> Var<'g> {
    x.matmul(p.get(&format!("{name}.w"))) + p.get(&format!("{name}.b"))
}

pub(crate) fn layer_norm<'g>(p: &Bound<'g>, name: &str, x: Var<'g>) -> Var<'g> {
    x.layer_norm(p.get(&format!("{name}.gamma")), p.get(&format!("{name}.beta")), 1e-5)
}

/// Multi-head scaled dot-product attention; queries come from `query`, keys
/// and values from `memory`.
pub(crate) fn attention<'g>(p: &Bound<'g>, name: &str, query: Var<'g>, memory: Var<'g>, n_heads: usize) -> Var<'g> {
    let qs = query.shape();
    let (b, lq, d) = (qs[0], qs[1], qs[2]);
    let lk = memory.shape()[1];
    let dh = d / n_heads;
    let split = |x: Var<'g>, l: usize| {
        x.reshape(&[b, l, n_heads, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b * n_heads, l, dh])
    };
    let q = split(linear(p, &format!("{name}.q"), query), lq);
    let k = split(linear(p, &format!("{name}.k"), memory), lk);
    let v = split(linear(p, &format!("{name}.v"), memory), lk);
    let weights = q.bmm(k, false, true).scale(1.0 / (dh as f64).sqrt()).softmax();
    let ctx = weights
        .bmm(v, false, false)
        .reshape(&[b, n_heads, lq, dh])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b, lq, d]);
    linear(p, &format!("{name}.o"), ctx)
}

pub(crate) fn feed_forward<'g>(p: &Bound<'g>, name: &str, x: Var<'g>) -> Var<'g> {
    let h = linear(p, &format!("{name}.0"), x).gelu();
    linear(p, &format!("{name}.1"), h)
}

/// Inverted dropout; identity when `rng` is `None`.
pub(crate) fn dropout<'g>(x: Var<'g>, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var<'g> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let shape = x.shape();
            let mask =
                Tensor::from_shape_simple_fn(
                    IxDyn(&shape),
                    || {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    },
                );
            x * x.graph().constant(mask)
        }
        _ => x,
    }
}

/// Sinusoidal embedding of scalar positions: first half sines, second half cosines.
pub fn sinusoidal(positions: &[f64], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((positions.len(), dim));
    for (i, &pos) in positions.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            out[[i, k]] = (pos * freq).sin();
            out[[i, half + k]] = (pos * freq).cos();
        }
    }
    out
}

/// Parameter initialization helpers. Weights and biases are drawn uniformly
/// from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) struct Init<'a> {
    pub params: &'a mut ParamSet,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut uniform =
            |shape: &[usize]| Tensor::from_shape_simple_fn(IxDyn(shape), || self.rng.random_range(-bound..bound));
        let w = uniform(&[fan_in, fan_out]);
        let b = uniform(&[fan_out]);
        self.params.insert(format!("{name}.w"), w);
        self.params.insert(format!("{name}.b"), b);
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) {
        self.params.insert(format!("{name}.gamma"), Tensor::ones(IxDyn(&[dim])));
        self.params.insert(format!("{name}.beta"), Tensor::zeros(IxDyn(&[dim])));
    }

    pub fn attention(&mut self, name: &str, dim: usize) {
        for part in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{part}"), dim, dim);
        }
    }

    pub fn feed_forward(&mut self, name: &str, dim: usize, hidden: usize) {
        self.linear(&format!("{name}.0"), dim, hidden);
        self.linear(&format!("{name}.1"), hidden, dim);
    }
}

/// A constant `[1, L, d]` slice of a positional table.
pub(crate) fn positions<'g>(graph: &'g Graph, table: &Array2<f64>, len: usize) -> Var<'g> {
    let d = table.ncols();
    let slab = table
        .slice(ndarray::s![..len, ..])
        .to_owned()
        .into_shape_with_order((1, len, d))
        .unwrap();
    graph.constant(slab.into_dyn())
}
