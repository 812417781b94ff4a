use mam_core::align::{
    alignment_loss, barlow_align, contrastive_align, covariance_align, latent_mse_align, llma, simclr_align,
    vicreg_align, AlignMethod, AlignmentConfig,
};
use mam_core::denoiser::extract_windows;
use mam_core::objective::{denoise_loss, energy_loss, total_loss, AlphaMode, LossParts};
use mam_oracles::losses as oracles;
use mam_oracles::{fd_gradient_error, random_rows, random_seq, rel_err, rows_tensor, seq_tensor};
use mam_tape::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: usize = 100;

#[test]
fn contrastive_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..CASES {
        let (b, c, d) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(2..5));
        let l = c * rng.random_range(1..4) + rng.random_range(0..c);
        let tau = rng.random_range(0.05..2.0);
        let zx = random_seq(&mut rng, b, l, d);
        let zy = random_seq(&mut rng, b, l, d);
        let g = Graph::inference();
        let wx = extract_windows(g.constant(seq_tensor(&zx)), c).unwrap();
        let wy = extract_windows(g.constant(seq_tensor(&zy)), c).unwrap();
        let got = contrastive_align(&wx, &wy, tau, false).unwrap().item();
        let want = oracles::contrastive(&zx, &zy, c, tau);
        assert!(rel_err(got, want) < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn contrastive_full_table_b2_m3() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let zx = random_seq(&mut rng, 2, 12, 3);
    let zy = random_seq(&mut rng, 2, 12, 3);
    let g = Graph::inference();
    let wx = extract_windows(g.constant(seq_tensor(&zx)), 4).unwrap();
    let wy = extract_windows(g.constant(seq_tensor(&zy)), 4).unwrap();
    assert_eq!(wx.num_windows, 3);
    let got = contrastive_align(&wx, &wy, 0.1, false).unwrap().item();
    assert!(rel_err(got, oracles::contrastive(&zx, &zy, 4, 0.1)) < 1e-6);
}

#[test]
fn covariance_and_llma_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = AlignmentConfig::default();
    for _ in 0..CASES {
        let (b, c, d) = (rng.random_range(1..4), rng.random_range(2..6), rng.random_range(1..5));
        let l = c * rng.random_range(1..4) + rng.random_range(0..c);
        let zx = random_seq(&mut rng, b, l, d);
        let zy = random_seq(&mut rng, b, l, d);
        let g = Graph::inference();
        let wx = extract_windows(g.constant(seq_tensor(&zx)), c).unwrap();
        let wy = extract_windows(g.constant(seq_tensor(&zy)), c).unwrap();
        let cov = covariance_align(&wx, &wy).unwrap().item();
        let want_cov = oracles::covariance(&zx, &zy, c);
        assert!(rel_err(cov, want_cov) < 1e-6, "{cov} vs {want_cov}");
        let both = llma(&wx, &wy, &cfg).unwrap().item();
        let want = want_cov + oracles::contrastive(&zx, &zy, c, cfg.temperature);
        assert!(rel_err(both, want) < 1e-6);
        let con = contrastive_align(&wx, &wy, cfg.temperature, false).unwrap().item();
        assert!((both - (con + cov)).abs() <= 1e-12 * both.abs().max(1.0));
    }
}

#[test]
fn covariance_single_window_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let zx = random_seq(&mut rng, 1, 4, 3);
    let zy = random_seq(&mut rng, 1, 4, 3);
    let g = Graph::inference();
    let wx = extract_windows(g.constant(seq_tensor(&zx)), 4).unwrap();
    let wy = extract_windows(g.constant(seq_tensor(&zy)), 4).unwrap();
    let got = covariance_align(&wx, &wy).unwrap().item();
    assert!(rel_err(got, oracles::covariance(&zx, &zy, 4)) < 1e-6);
}

#[test]
fn baselines_match_loop_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..CASES {
        let (n, d) = (rng.random_range(2..9), rng.random_range(1..6));
        let tau = rng.random_range(0.05..2.0);
        let lam = rng.random_range(0.0..0.1);
        let w = [
            rng.random_range(0.0..30.0),
            rng.random_range(0.0..30.0),
            rng.random_range(0.0..2.0),
        ];
        let gamma = rng.random_range(0.1..2.0);
        let zx = random_rows(&mut rng, n, d);
        let zy = random_rows(&mut rng, n, d);
        let g = Graph::inference();
        let (a, b) = (g.constant(rows_tensor(&zx)), g.constant(rows_tensor(&zy)));
        let pairs = [
            (simclr_align(a, b, tau).unwrap().item(), oracles::nt_xent(&zx, &zy, tau)),
            (barlow_align(a, b, lam).unwrap().item(), oracles::barlow(&zx, &zy, lam)),
            (
                vicreg_align(a, b, w, gamma).unwrap().item(),
                oracles::vicreg(&zx, &zy, w, gamma),
            ),
        ];
        for (got, want) in pairs {
            assert!(rel_err(got, want) < 1e-6, "{got} vs {want}");
        }
    }
}

#[test]
fn latent_mse_and_objective_terms_match_loop_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..CASES {
        let (b, l, d) = (rng.random_range(1..4), rng.random_range(2..10), rng.random_range(1..5));
        let x = random_seq(&mut rng, b, l, d);
        let y = random_seq(&mut rng, b, l, d);
        let g = Graph::inference();
        let (a, c) = (g.constant(seq_tensor(&x)), g.constant(seq_tensor(&y)));
        let got = latent_mse_align(a, c).unwrap().item();
        assert!(rel_err(got, oracles::latent_mse(&x, &y)) < 1e-6);
        let got = denoise_loss(a, c).unwrap().item();
        assert!(rel_err(got, oracles::mse(&x, &y)) < 1e-6);
        let got = energy_loss(a, c).unwrap().item();
        assert!(rel_err(got, oracles::energy_loss(&x, &y)) < 1e-6);
    }
}

fn method_config(method: AlignMethod) -> AlignmentConfig {
    AlignmentConfig {
        method,
        window_len: 3,
        temperature: 0.5,
        ..Default::default()
    }
}

fn align_value(zx: &Tensor, zy: &Tensor, cfg: &AlignmentConfig) -> f64 {
    let g = Graph::inference();
    alignment_loss(g.constant(zx.clone()), g.constant(zy.clone()), cfg)
        .unwrap()
        .item()
}

#[test]
fn every_method_passes_finite_difference_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let zx = seq_tensor(&random_seq(&mut rng, 2, 7, 3));
    let zy = seq_tensor(&random_seq(&mut rng, 2, 7, 3));
    for method in AlignMethod::ALL {
        for symmetrize in [false, true] {
            let cfg = AlignmentConfig {
                symmetrize,
                ..method_config(method)
            };
            let g = Graph::new();
            let (a, b) = (g.param(zx.clone()), g.param(zy.clone()));
            let loss = alignment_loss(a, b, &cfg).unwrap();
            let grads = g.backward(loss);
            let ga = grads.wrt_or_zeros(a);
            let gb = grads.wrt_or_zeros(b);
            let ex = fd_gradient_error(&zx, &ga, |t| align_value(t, &zy, &cfg));
            let ey = fd_gradient_error(&zy, &gb, |t| align_value(&zx, t, &cfg));
            assert!(ex < 1e-3 && ey < 1e-3, "{method}: {ex} {ey}");
        }
    }
}

#[test]
fn objective_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = seq_tensor(&random_seq(&mut rng, 2, 5, 2));
    let y = seq_tensor(&random_seq(&mut rng, 2, 5, 2));
    let value = |t: &Tensor| {
        let g = Graph::inference();
        energy_loss(g.constant(t.clone()), g.constant(y.clone()))
            .unwrap()
            .item()
    };
    let g = Graph::new();
    let a = g.param(x.clone());
    let loss = energy_loss(a, g.constant(y.clone())).unwrap();
    let grad = g.backward(loss).wrt_or_zeros(a);
    assert!(fd_gradient_error(&x, &grad, value) < 1e-3);

    for mode in [AlphaMode::Softplus, AlphaMode::Uncertainty] {
        let total_at = |r: f64| {
            let g = Graph::inference();
            let parts = LossParts {
                denoise_x: g.scalar(0.4),
                denoise_y: g.scalar(0.6),
                energy_x: g.scalar(0.1),
                energy_y: g.scalar(0.2),
                align: g.scalar(1.3),
            };
            total_loss(&parts, g.scalar(r), mode).unwrap().1.total
        };
        let g = Graph::new();
        let raw = g.param(ndarray::arr0(0.25).into_dyn());
        let parts = LossParts {
            denoise_x: g.scalar(0.4),
            denoise_y: g.scalar(0.6),
            energy_x: g.scalar(0.1),
            energy_y: g.scalar(0.2),
            align: g.scalar(1.3),
        };
        let (total, _) = total_loss(&parts, raw, mode).unwrap();
        let analytic = g.backward(total).wrt(raw).unwrap()[[]];
        let h = 1e-6;
        let numeric = (total_at(0.25 + h) - total_at(0.25 - h)) / (2.0 * h);
        assert!(rel_err(analytic, numeric) < 1e-3);
    }
}
