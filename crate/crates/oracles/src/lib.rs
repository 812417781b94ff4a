//! Brute-force reference implementations for the test suites. Nothing here
//! calls into the library under test.

pub mod linalg;
pub mod losses;

use mam_tape::Tensor;
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use losses::Seq;

pub fn random_seq(rng: &mut ChaCha8Rng, b: usize, l: usize, d: usize) -> Seq {
    (0..b)
        .map(|_| {
            (0..l)
                .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect()
        })
        .collect()
}

pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}

pub fn seq_tensor(z: &Seq) -> Tensor {
    let (b, l, d) = (z.len(), z[0].len(), z[0][0].len());
    Tensor::from_shape_fn(IxDyn(&[b, l, d]), |ix| z[ix[0]][ix[1]][ix[2]])
}

pub fn rows_tensor(z: &[Vec<f64>]) -> Tensor {
    let (n, d) = (z.len(), z[0].len());
    Tensor::from_shape_fn(IxDyn(&[n, d]), |ix| z[ix[0]][ix[1]])
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

/// Largest relative error between an analytic gradient and central
/// differences of `f`, with a floor on the denominator for tiny entries.
pub fn fd_gradient_error(x: &Tensor, analytic: &Tensor, f: impl Fn(&Tensor) -> f64) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.as_slice_mut().unwrap()[i] += h;
        minus.as_slice_mut().unwrap()[i] -= h;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
        let a = analytic.as_slice().unwrap()[i];
        let scale = a.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max((a - numeric).abs() / scale);
    }
    worst
}
