use mam_core::data::ModalitySchema;
use mam_core::denoiser::{Denoiser, DenoiserConfig};
use mam_core::diffusion::Denoise;
use mam_tape::Graph;
use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

fn small() -> DenoiserConfig {
    DenoiserConfig {
        max_len: 12,
        num_steps: 10,
        ..DenoiserConfig::desk(3, 2)
    }
}

#[test]
fn every_parameter_receives_gradient() {
    let model = Denoiser::new(small(), 7).unwrap();
    let graph = Graph::new();
    let p = model.params.bind(&graph);
    let x = graph.constant(randn((2, 12, 3), 1).into_dyn());
    let c = graph.constant(randn((2, 12, 2), 2).into_dyn());
    let out = model.forward(&p, x, c, &[3, 8], None).unwrap();
    let loss = out.x0_hat.square().mean();
    let grads = p.grads(&graph.backward(loss));
    let mut checked = 0;
    for (name, _) in model.params.iter() {
        let g = grads.get(name).unwrap_or_else(|| panic!("{name} has no gradient"));
        let max = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max > 0.0, "{name} gradient is identically zero");
        checked += 1;
    }
    assert_eq!(checked, model.params.len());
}

#[test]
fn positional_encoding_breaks_permutation_equivariance() {
    let model = Denoiser::new(small(), 3).unwrap();
    let x = randn((1, 12, 3), 4);
    let c = randn((1, 12, 2), 5);
    let perm: Vec<usize> = (0..12).rev().collect();
    let (y, _) = model.denoise_forward(&x, &c, &[5]).unwrap();
    let (yp, _) = model
        .denoise_forward(&x.select(Axis(1), &perm), &c.select(Axis(1), &perm), &[5])
        .unwrap();
    let dev = (&yp - &y.select(Axis(1), &perm))
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(dev > 1e-3, "max deviation {dev}");
}

#[test]
fn inference_is_deterministic() {
    let model = Denoiser::new(small(), 3).unwrap();
    let x = randn((2, 9, 3), 6);
    let c = randn((2, 9, 2), 7);
    let a = model.predict_x0(&x, &c, &[1, 10]).unwrap();
    let b = model.predict_x0(&x, &c, &[1, 10]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn full_size_parameter_census() {
    let (dx, dy) = (
        ModalitySchema::kinematics().channels.len(),
        ModalitySchema::kinetics().channels.len(),
    );
    let total = Denoiser::new(DenoiserConfig::full_size(dx, dy), 0)
        .unwrap()
        .count_params()
        + Denoiser::new(DenoiserConfig::full_size(dy, dx), 0)
            .unwrap()
            .count_params();
    assert!((10_000_000..=50_000_000).contains(&total), "{total}");
    let desk = Denoiser::new(DenoiserConfig::desk(dx, dy), 0).unwrap().count_params();
    assert!(desk < 1_000_000, "{desk}");
}
